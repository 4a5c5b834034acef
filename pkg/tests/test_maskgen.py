import numpy as np
import pytest

from weakcanopy.labelgen import NEG, POS, UNKNOWN
from weakcanopy.maskgen import SCENARIO_NAMES, ScenarioConfig, build_masks, get_scenario, load_scenarios
from weakcanopy.objectness import ObjectnessBundle


def _random_case(rng, n=16):
    y = rng.choice([UNKNOWN, NEG, POS], size=(n, n), p=[0.6, 0.3, 0.1]).astype(np.uint8)
    objects = rng.random((n, n)) < 0.3
    disk = rng.random((n, n)) < 0.2
    regions = rng.integers(0, 4, size=(n, n)).astype(np.uint16)
    o = rng.random((n, n)).astype(np.float32)
    bundle = ObjectnessBundle(np.zeros((n, n), np.float32), o, regions, rng.random((n, n)) < 0.25)
    return y, objects, disk, bundle


def _oracle(name, y, objects, disk, bundle, t=0.2):
    """Set algebra evaluated pixel by pixel."""
    n = y.shape[0]
    m = np.zeros_like(objects)
    lab = np.zeros(y.shape, np.uint8)
    m_r = np.zeros_like(objects)
    for i in range(n):
        for j in range(n):
            pos, neg = y[i, j] == POS, y[i, j] == NEG
            if name == "baseline":
                m[i, j] = True
                lab[i, j] = POS if disk[i, j] else NEG
            elif name == "obj":
                m[i, j] = pos or bundle.boundaries[i, j]
                lab[i, j] = POS if pos else (NEG if m[i, j] else UNKNOWN)
                m_r[i, j] = True
            else:
                m[i, j] = pos or neg or (objects[i, j] and not disk[i, j])
                lab[i, j] = POS if pos else (NEG if m[i, j] else UNKNOWN)
                if name == "maskobj":
                    m_r[i, j] = disk[i, j]
                elif name == "maskobjthresh":
                    m_r[i, j] = disk[i, j] and bundle.o[i, j] >= t
    return m, lab, m_r


def test_bundled_table():
    table = load_scenarios()
    assert tuple(table) == SCENARIO_NAMES
    assert [table[n].beta for n in SCENARIO_NAMES] == [0.0, 1.0, 0.0, 1.0, 1.0]
    assert table["maskobjthresh"].t == 0.2


def test_unknown_scenario():
    with pytest.raises(KeyError):
        get_scenario("nope")


def test_config_validation():
    with pytest.raises(ValueError):
        ScenarioConfig("x", 1.0, "ones", "none")
    with pytest.raises(ValueError):
        ScenarioConfig("x", 0.0, "bogus", "none")
    with pytest.raises(ValueError):
        ScenarioConfig("x", 1.0, "ones", "disk_and_objectness_ge_t")


def test_custom_table(tmp_path):
    (tmp_path / "s.toml").write_text('[[scenario]]\nname="a"\nbeta=0.5\nmask="ones"\nregion_mask="ones"\n')
    assert load_scenarios(tmp_path / "s.toml")["a"].beta == 0.5


@pytest.mark.parametrize("name", SCENARIO_NAMES)
def test_masks_match_set_algebra(name, rng):
    sc = get_scenario(name)
    for _ in range(200 if name != "baseline" else 100):
        y, objects, disk, bundle = _random_case(rng)
        masks, eff = build_masks(sc, y, objects, disk, bundle)
        m, lab, m_r = _oracle(name, y, objects, disk, bundle, sc.t)
        np.testing.assert_array_equal(masks.m, m)
        np.testing.assert_array_equal(eff, lab)
        np.testing.assert_array_equal(masks.m_r, m_r)
        assert masks.m.dtype == bool and masks.m_r.dtype == bool


def test_thousand_random_cases_all_scenarios(rng):
    table = load_scenarios()
    for k in range(1000):
        y, objects, disk, bundle = _random_case(rng)
        name = SCENARIO_NAMES[k % 5]
        masks, eff = build_masks(table[name], y, objects, disk, bundle)
        m, lab, m_r = _oracle(name, y, objects, disk, bundle)
        assert (masks.m == m).all() and (eff == lab).all() and (masks.m_r == m_r).all()


def test_obj_positive_beats_boundary():
    y = np.array([[POS, UNKNOWN]], np.uint8)
    b = ObjectnessBundle(np.zeros((1, 2), np.float32), np.ones((1, 2), np.float32),
                         np.ones((1, 2), np.uint16), np.array([[True, True]]))
    _, eff = build_masks(get_scenario("obj"), y, np.zeros((1, 2), bool), np.zeros((1, 2), bool), b)
    assert eff.tolist() == [[POS, NEG]]


def test_requires_bundle_and_shape():
    y = np.zeros((4, 4), np.uint8)
    z = np.zeros((4, 4), bool)
    with pytest.raises(ValueError):
        build_masks(get_scenario("maskobj"), y, z, z, None)
    with pytest.raises(ValueError):
        build_masks(get_scenario("mask"), y, z, np.zeros((3, 4), bool))
    masks, _ = build_masks(get_scenario("mask"), y, z, z)
    assert not masks.m.any()
