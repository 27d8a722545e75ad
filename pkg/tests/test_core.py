import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stockhybrid.core import (AbundanceVector, AgeRange, BiologySeries, DomainError, FeatureVector,
                              FleetKind, FleetObservation, MissingDataError, ObservationSeries,
                              SchemaError, baranov_catch, flatten_features, recruitment_of, ssb)

AR3 = AgeRange(1, 3, True)


def bio3(weight=(1.0, 1.0, 1.0), maturity=(1.0, 1.0, 1.0), first=2000, n=3):
    return BiologySeries.constant(first, n, AR3, weight, maturity, 0.2)


def test_ssb_zero_maturity():
    n = AbundanceVector(2000, [10, 20, 30], AR3)
    assert ssb(n, bio3(maturity=(0, 0, 0))) == 0.0


def test_ssb_single_mature_age():
    n = AbundanceVector(2000, [0, 100, 0], AR3)
    assert ssb(n, bio3(weight=(1.0, 2.0, 1.0), maturity=(0, 1, 0))) == pytest.approx(200.0)


def test_ssb_unit_weights_sums_abundance():
    n = AbundanceVector(2001, [5, 10, 20], AR3)
    assert ssb(n, bio3()) == pytest.approx(35.0)


def test_ssb_missing_year():
    n = AbundanceVector(1990, [5, 10, 20], AR3)
    with pytest.raises(MissingDataError):
        ssb(n, bio3())


@given(st.floats(0, 1e3), st.lists(st.floats(0, 1e6), min_size=3, max_size=3))
def test_ssb_linear(alpha, values):
    n = AbundanceVector(2000, values, AR3)
    b = bio3(weight=(0.5, 1.5, 2.5), maturity=(0.2, 0.7, 1.0))
    assert ssb(n.scaled(alpha), b) == pytest.approx(alpha * ssb(n, b), rel=1e-12, abs=1e-9)


def test_recruitment_of():
    assert recruitment_of(AbundanceVector(2000, [5, 10, 20], AR3)) == 5
    assert recruitment_of(AbundanceVector(2000, [0, 0, 0], AR3)) == 0


def test_baranov_zero_f():
    np.testing.assert_array_equal(baranov_catch([1000, 50], [0, 0], 0.2), [0, 0])


def test_baranov_arithmetic():
    c = baranov_catch([1000.0], [0.2], 0.2)
    assert c[0] == pytest.approx(0.5 * (1 - math.exp(-0.4)) * 1000)
    assert c[0] == pytest.approx(164.84, abs=5e-3)


def test_baranov_asymptote_and_zero_mortality():
    assert baranov_catch([1000.0], [50.0], 0.0)[0] == pytest.approx(1000.0)
    assert baranov_catch([1000.0], [0.0], 0.0)[0] == 0.0


def test_baranov_negative_inputs():
    for args in (([-1.0], [0.1], 0.2), ([1.0], [-0.1], 0.2), ([1.0], [0.1], -0.2)):
        with pytest.raises(DomainError):
            baranov_catch(*args)


@given(st.floats(0, 1e6), st.floats(0, 5), st.floats(0, 5), st.floats(0, 5))
def test_baranov_bounded_and_monotone(n, f1, f2, m):
    lo, hi = sorted((f1, f2))
    c_lo, c_hi = baranov_catch([n], [lo], m)[0], baranov_catch([n], [hi], m)[0]
    assert c_hi <= n * (1 - math.exp(-(hi + m))) * (1 + 1e-12) + 1e-9
    assert c_lo <= c_hi * (1 + 1e-12) + 1e-9


def _obs():
    catch = FleetObservation("catch", FleetKind.COMMERCIAL_CATCH, 2000, [[1.0, 2.0, 3.0]], (1, 2, 3))
    survey = FleetObservation("s", FleetKind.SURVEY, 2000, [[4.0, math.nan]], (1, 2), timing=0.5)
    return ObservationSeries((survey, catch), 2000, 2000)


def test_flatten_empty():
    fv = flatten_features()
    assert len(fv) == 0


def test_flatten_five_features_in_documented_order():
    n = AbundanceVector(2000, [1, 2, 3], AR3)
    survey = FleetObservation("s", FleetKind.SURVEY, 2000, [[4.0, 5.0]], (1, 2), timing=0.5)
    fv = flatten_features(abundance=n, observations=[survey], year=2000)
    assert fv.names == ("N_a1", "N_a2", "N_a3", "s_a1", "s_a2")
    np.testing.assert_array_equal(fv.values, [1, 2, 3, 4, 5])
    assert flatten_features(abundance=n, observations=[survey], year=2000) == fv


def test_flatten_fleets_sorted_and_gap_years_missing():
    survey = FleetObservation("s", FleetKind.SURVEY, 2000, [[4.0, 5.0]], (1, 2), timing=0.5)
    catch = FleetObservation("c", FleetKind.COMMERCIAL_CATCH, 1999, [[1.0, 1.0, 1.0]], (1, 2, 3))
    fv = flatten_features(observations=ObservationSeries((survey, catch), 1999, 2000), year=2000)
    assert fv.names == ("c_a1", "c_a2", "c_a3", "s_a1", "s_a2")
    assert np.isnan(fv.values[:3]).all()


def test_flatten_missing_cell_and_parameters():
    fv = flatten_features(parameters={"z": 1.0, "SSB_hat": 2.0, "REC_hat": 3.0}, observations=_obs(), year=2000)
    assert fv.names[:3] == ("REC_hat", "SSB_hat", "z")
    assert math.isnan(fv["s_a2"])
    assert fv["s_a1"] == 4.0


def test_flatten_unstratified_fleet():
    idx = FleetObservation("acoustic", FleetKind.SURVEY, 2000, [[7.0]], None, timing=0.5)
    catch = FleetObservation("catch", FleetKind.COMMERCIAL_CATCH, 2000, [[1.0, 2.0, 3.0]], (1, 2, 3))
    fv = flatten_features(observations=ObservationSeries((idx, catch), 2000, 2000), year=2000)
    assert fv.names[0] == "acoustic" and fv["acoustic"] == 7.0


def test_feature_vector_duplicates():
    with pytest.raises(SchemaError):
        FeatureVector(("a", "a"), [1.0, 2.0])


def test_schema_id_depends_on_names_only():
    a = FeatureVector(("a", "b"), [1.0, 2.0])
    b = FeatureVector(("a", "b"), [3.0, 4.0])
    c = FeatureVector(("b", "a"), [1.0, 2.0])
    assert a.schema_id == b.schema_id != c.schema_id


@settings(max_examples=50)
@given(st.lists(st.floats(0, 1e6), min_size=3, max_size=3), st.lists(st.floats(0, 1e6), min_size=3, max_size=3))
def test_flatten_injective(v1, v2):
    f1 = flatten_features(abundance=AbundanceVector(2000, v1, AR3))
    f2 = flatten_features(abundance=AbundanceVector(2000, v2, AR3))
    assert f1.schema_id == f2.schema_id
    assert (v1 == v2) == bool(np.array_equal(f1.values, f2.values))


def test_observations_reject_non_positive():
    with pytest.raises(DomainError):
        FleetObservation("c", FleetKind.COMMERCIAL_CATCH, 2000, [[0.0]], (1,))


def test_observations_need_both_kinds():
    catch = FleetObservation("c", FleetKind.COMMERCIAL_CATCH, 2000, [[1.0]], (1,))
    with pytest.raises(SchemaError):
        ObservationSeries((catch,), 2000, 2000)


def test_biology_extended_carries_forward():
    b = BiologySeries(2000, AR3, [[1, 1, 1], [2, 2, 2]], [[0, 1, 1]] * 2, [[0.2] * 3] * 2)
    e = b.extended(2004)
    assert e.last_year == 2004
    np.testing.assert_array_equal(e.at(2004)[0], [2, 2, 2])
    assert b.extended(2000) is b
