import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from analogyflow.analogydata import (
    FAMILIES,
    HINT_IDS,
    IDENTITY,
    SplitError,
    TaskSplit,
    TransformError,
    TransformSpec,
    apply_transform,
    gen_content,
    grid,
    make_composite,
    make_triplet,
    read_pgm,
    sample_triplets,
    split_quadrants,
    split_tasks,
    stack,
    to_pgm,
    write_pgm,
)
from analogyflow.flowmodel import extract_quadrant

ALL_SPECS = [
    TransformSpec("invert"), TransformSpec("hflip"), TransformSpec("vflip"), TransformSpec("transpose"),
    TransformSpec("roll_right", 1), TransformSpec("roll_right", 2), TransformSpec("roll_right", 3),
    TransformSpec("brightness", 0.4), TransformSpec("brightness", -0.5), TransformSpec("contrast", 0.5),
    TransformSpec("contrast", 2.0), TransformSpec("box_blur3"),
]

specs = st.sampled_from(ALL_SPECS)
seeds = st.integers(0, 2**62)


def test_content_is_deterministic():
    assert gen_content(42).tobytes() == gen_content(42).tobytes()
    assert gen_content(42).tobytes() != gen_content(43).tobytes()


@settings(max_examples=200, deadline=None)
@given(seeds)
def test_content_range_and_span(seed):
    img = gen_content(seed)
    assert img.shape == (8, 8)
    assert img.min() >= 0.0 and img.max() <= 1.0
    assert img.min() <= 0.1 and img.max() >= 0.9


def test_mean_pixel_over_a_thousand_seeds():
    mean = np.mean([gen_content(s).mean() for s in range(1000)])
    assert 0.2 < mean < 0.8


def test_invert_quarter():
    np.testing.assert_allclose(apply_transform(TransformSpec("invert"), np.full((8, 8), 0.25)), 0.75)


def test_hflip_permutes_columns():
    block = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert apply_transform(TransformSpec("hflip"), block).tolist() == [[2.0, 1.0], [4.0, 3.0]]


def test_brightness_clamps():
    out = apply_transform(TransformSpec("brightness", 0.3), np.full((8, 8), 0.9))
    assert np.all(out == 1.0)


def test_contrast_is_about_midpoint():
    x = np.array([[0.25, 0.5, 0.75]])
    np.testing.assert_allclose(apply_transform(TransformSpec("contrast", 2.0), x), [[0.0, 0.5, 1.0]])


def test_vflip_transpose_and_roll():
    x = np.arange(64, dtype=float).reshape(8, 8) / 63
    np.testing.assert_array_equal(apply_transform(TransformSpec("vflip"), x), x[::-1])
    np.testing.assert_array_equal(apply_transform(TransformSpec("transpose"), x), x.T)
    rolled = apply_transform(TransformSpec("roll_right", 2), x)
    np.testing.assert_array_equal(rolled[:, 2:], x[:, :-2])
    np.testing.assert_array_equal(rolled[:, :2], x[:, -2:])


def test_box_blur_uses_reflect_padding():
    x = np.random.default_rng(0).random((8, 8))
    out = apply_transform(TransformSpec("box_blur3"), x)
    padded = np.pad(x, 1, mode="reflect")
    assert np.isclose(out[0, 0], padded[0:3, 0:3].mean())
    assert np.isclose(out[4, 5], x[3:6, 4:7].mean())
    np.testing.assert_allclose(apply_transform(TransformSpec("box_blur3"), np.full((8, 8), 0.3)), 0.3)


def test_unknown_family_and_bad_parameters():
    with pytest.raises(TransformError):
        TransformSpec("rotate")
    with pytest.raises(TransformError):
        TransformSpec("roll_right", 4)
    with pytest.raises(TransformError):
        TransformSpec("brightness", 0.6)
    with pytest.raises(TransformError):
        TransformSpec("contrast", 0.4)
    with pytest.raises(TransformError):
        TransformSpec("invert", 1.0)
    with pytest.raises(TransformError):
        TransformSpec("brightness")


def test_spec_text_round_trip():
    for spec in ALL_SPECS:
        assert TransformSpec.parse(str(spec)) == spec
    assert str(TransformSpec("roll_right", 3)) == "roll_right:3"
    assert str(TransformSpec("brightness", -0.2)) == "brightness:-0.2"


def test_hint_ids_are_lexicographic():
    assert list(FAMILIES) == sorted(FAMILIES)
    assert [HINT_IDS[f] for f in sorted(FAMILIES)] == list(range(len(FAMILIES)))
    assert TransformSpec("roll_right", 1).hint == TransformSpec("roll_right", 3).hint


@settings(max_examples=200, deadline=None)
@given(specs, seeds)
def test_transforms_stay_in_unit_range(spec, seed):
    out = apply_transform(spec, gen_content(seed))
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_involutions():
    x = gen_content(7)
    for fam in ("hflip", "vflip", "transpose"):
        s = TransformSpec(fam)
        np.testing.assert_array_equal(apply_transform(s, apply_transform(s, x)), x)
    inv = TransformSpec("invert")
    # 1 - (1 - x) is exact only up to one rounding step
    np.testing.assert_allclose(apply_transform(inv, apply_transform(inv, x)), x, rtol=0, atol=1e-15)
    y = x
    for _ in range(8):
        y = apply_transform(TransformSpec("roll_right", 1), y)
    np.testing.assert_array_equal(y, x)
    z = x
    for _ in range(4):
        z = apply_transform(TransformSpec("roll_right", 2), z)
    np.testing.assert_array_equal(z, x)


def test_identity_triplet():
    t = make_triplet(IDENTITY, 1, 2)
    np.testing.assert_array_equal(t.a_prime, t.a)
    np.testing.assert_array_equal(t.b_prime_oracle, t.b)


def test_equal_seeds_give_equal_halves():
    t = make_triplet(TransformSpec("contrast", 1.5), 5, 5)
    np.testing.assert_array_equal(t.a, t.b)
    np.testing.assert_array_equal(t.a_prime, t.b_prime_oracle)


@settings(max_examples=100, deadline=None)
@given(specs, seeds, seeds)
def test_oracle_closure(spec, sa, sb):
    t = make_triplet(spec, sa, sb)
    assert apply_transform(spec, t.b).tobytes() == t.b_prime_oracle.tobytes()
    assert apply_transform(spec, t.a).tobytes() == t.a_prime.tobytes()


def test_identity_composite_has_equal_context_and_target():
    c = make_composite(make_triplet(IDENTITY, 3, 4))
    np.testing.assert_array_equal(c.y, c.x0)


def test_composite_layout():
    t = make_triplet(TransformSpec("invert"), 8, 9)
    c = make_composite(t)
    assert c.y.shape == (16, 16)
    np.testing.assert_array_equal(extract_quadrant(c.y, "BR"), t.b)
    np.testing.assert_array_equal(extract_quadrant(c.x0, "BR"), t.b_prime_oracle)
    np.testing.assert_array_equal(extract_quadrant(c.x0, "TL"), t.a)
    np.testing.assert_array_equal(extract_quadrant(c.x0, "TR"), t.a_prime)
    np.testing.assert_array_equal(extract_quadrant(c.x0, "BL"), t.b)


def test_context_and_target_agree_on_exactly_three_quadrants():
    # brightness +0.3 moves every pixel of a raster that stays below 0.7
    spec = TransformSpec("brightness", 0.3)
    b = np.clip(gen_content(10) * 0.6, 0.0, 0.6)
    t = make_triplet(spec, 11, 12)
    t = type(t)(a=t.a, a_prime=t.a_prime, b=b, b_prime_oracle=apply_transform(spec, b), spec=spec,
                content_seed=t.content_seed)
    assert np.all(t.b_prime_oracle != b)
    c = make_composite(t)
    assert int(np.sum(c.y == c.x0)) == 3 * 64


def test_quadrant_round_trip():
    comp = np.random.default_rng(0).random((16, 16))
    q = split_quadrants(comp)
    np.testing.assert_array_equal(grid(q["TL"], q["TR"], q["BL"], q["BR"]), comp)


def test_default_split_membership():
    split = split_tasks()
    assert TransformSpec("brightness", 0.3) in split.unseen_params
    assert TransformSpec("vflip") in split.unseen_families
    assert not set(split.seen) & set(split.unseen_params)
    assert not set(split.seen) & set(split.unseen_families)
    assert not set(split.unseen_params) & set(split.unseen_families)
    assert len(split.seen) == 10 and len(split.unseen_params) == 5
    assert split.label(TransformSpec("hflip")) == "seen"


def test_family_restriction():
    split = split_tasks(families=["brightness", "hflip"])
    assert {s.family for s in split.seen} == {"brightness", "hflip"}
    assert {s.family for s in split.unseen_params} == {"brightness"}
    assert [s.family for s in split.unseen_families] == ["vflip", "transpose", "box_blur3"]


def test_overlapping_split_is_rejected():
    with pytest.raises(SplitError):
        split_tasks(seen=["hflip", "brightness:0.3"])
    with pytest.raises(SplitError):
        split_tasks(unseen_families=["hflip"])
    with pytest.raises(SplitError):
        TaskSplit((TransformSpec("hflip"),), (TransformSpec("brightness", 0.3),), ())


def test_sampling_is_a_pure_function_of_seed_and_tag():
    specs = split_tasks().seen
    one = sample_triplets(specs, 20, 5, "x", 3)
    two = sample_triplets(specs, 20, 5, "x", 3)
    other = sample_triplets(specs, 20, 5, "x", 4)
    assert [t.content_seed for t in one] == [t.content_seed for t in two]
    assert [t.spec for t in one] == [t.spec for t in two]
    assert [t.content_seed for t in one] != [t.content_seed for t in other]


def test_stack_shapes():
    bt = stack(sample_triplets(split_tasks().seen, 6, 0))
    assert bt.y.shape == bt.x0.shape == (6, 256)
    assert bt.a.shape == (6, 64) and bt.hints.shape == (6,)
    assert np.all((bt.y >= 0) & (bt.y <= 1))


def test_pgm_format_and_rounding(tmp_path):
    img = np.array([[0.0, 1.0], [0.5, 1.5 / 255]])
    data = to_pgm(img)
    assert data.startswith(b"P5\n2 2\n255\n")
    # 127.5 and 1.5 both round half away from zero
    assert list(data[-4:]) == [0, 255, 128, 2]
    path = tmp_path / "x.pgm"
    write_pgm(path, img)
    back = read_pgm(path)
    assert back.shape == (2, 2)
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12
