import numpy as np
import pytest

from vineseg import data as D
from vineseg import synth as S


def test_noise_free_distinct_colours_determine_labels():
    rng = np.random.default_rng(0)
    p = S.sample_leaf_params(rng, 64, 64, "high", noise_sigma=0.0)
    img, mask = S.generate(p, 64, 64)
    colours = {}
    for k in range(3):
        pix = {tuple(v) for v in img[:, mask == k].T.tolist()}
        assert len(pix) == 1
        colours[k] = pix.pop()
    assert len(set(colours.values())) == 3


def test_same_seed_bit_identical_and_seeds_differ():
    a = S.generate_samples(3, 64, 64, seed=5)
    b = S.generate_samples(3, 64, 64, seed=5)
    c = S.generate_samples(3, 64, 64, seed=6)
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes() and x.mask.tobytes() == y.mask.tobytes()
    assert any(not np.array_equal(x.mask, z.mask) for x, z in zip(a, c))


@pytest.mark.parametrize("contrast", ["high", "low"])
@pytest.mark.parametrize("size", [(64, 64), (48, 80), (128, 128)])
def test_class_fractions_inside_bounds(contrast, size):
    for s in S.generate_samples(6, *size, contrast=contrast, seed=1):
        n = s.mask.size
        blade, vein = np.count_nonzero(s.mask == 1) / n, np.count_nonzero(s.mask == 2) / n
        assert S.BLADE_FRACTION[0] <= blade <= S.BLADE_FRACTION[1]
        assert S.VEIN_FRACTION[0] <= vein <= S.VEIN_FRACTION[1]
        counts = np.bincount(s.mask.reshape(-1), minlength=3)
        assert counts[2] == counts.min()


def test_veins_lie_inside_blade():
    rng = np.random.default_rng(2)
    for _ in range(10):
        p, _, mask = S.random_leaf(rng, 64, 64)
        for line in p.veins:
            pts = np.asarray(line)
            assert p.inside(pts[:, 0], pts[:, 1]).all()


def test_infeasible_geometry():
    p = S.LeafParams(center=(32, 32), semi_axes=(2, 1), rotation=0.0)
    with pytest.raises(S.InfeasibleGeometry):
        S.generate(p, 64, 64)
    with pytest.raises(S.InfeasibleGeometry):
        S.generate_samples(1, 4, 4)


def test_high_contrast_veins_further_from_blade_than_low():
    def mean_gap(contrast):
        gaps = []
        for s in S.generate_samples(5, 64, 64, contrast=contrast, seed=3, noise_sigma=0.0):
            blade = s.image[:, s.mask == 1].mean(axis=1)
            vein = s.image[:, s.mask == 2].mean(axis=1)
            gaps.append(np.linalg.norm(blade - vein))
        return np.mean(gaps)

    assert mean_gap("high") > mean_gap("low")


def test_dataset_written_and_valid(tmp_path):
    S.generate_dataset(tmp_path, 8, 64, 64, seed=1)
    names = D.dataset_names(tmp_path)
    assert len(names) == 8
    for s in D.load_dataset(tmp_path):
        assert s.mask.dtype == np.uint8 and set(np.unique(s.mask)) == {0, 1, 2}


def test_unwritable_directory(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        S.generate_dataset(blocker / "sub", 1, 64, 64)
