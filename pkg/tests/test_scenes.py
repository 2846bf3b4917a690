import numpy as np
import pytest
from scipy import ndimage

from tallydiff.scenes import (
    INSTANCE_GAP,
    PlacementError,
    PromptSpec,
    generate_scene,
    render_shape_mask,
)


def test_requested_counts_exact(vocab):
    prompt = PromptSpec(targets={0: 3})
    image, gt, spec = generate_scene(prompt, seed=5, vocab=vocab)
    assert spec.class_counts() == {0: 3}
    labels = set(np.unique(gt)) - {0}
    assert labels == {1, 2, 3}
    # each label is one connected component of the circle class
    for lbl in labels:
        _, n = ndimage.label(gt == lbl)
        assert n == 1


def test_multi_class_counts(vocab):
    prompt = PromptSpec(targets={0: 2, 1: 1})
    _, gt, spec = generate_scene(prompt, seed=9, vocab=vocab)
    assert spec.class_counts() == {0: 2, 1: 1}
    assert len(spec.instances) == 3


def test_same_seed_identical(vocab):
    prompt = PromptSpec(targets={2: 4, 5: 2})
    a_img, a_gt, _ = generate_scene(prompt, seed=123, vocab=vocab)
    b_img, b_gt, _ = generate_scene(prompt, seed=123, vocab=vocab)
    np.testing.assert_array_equal(a_img, b_img)
    np.testing.assert_array_equal(a_gt, b_gt)
    c_img, _, _ = generate_scene(prompt, seed=124, vocab=vocab)
    assert not np.array_equal(a_img, c_img)


def test_instances_keep_gap_and_stay_inside(vocab):
    prompt = PromptSpec(targets={0: 4, 1: 3, 2: 3})
    _, gt, spec = generate_scene(prompt, seed=31, vocab=vocab)
    n = len(spec.instances)
    masks = [gt == (i + 1) for i in range(n)]
    for i in range(n):
        assert masks[i].any()
        # fully inside the canvas with the border margin
        rows, cols = np.nonzero(masks[i])
        assert rows.min() >= 1 and cols.min() >= 1
        assert rows.max() < gt.shape[0] - 1 and cols.max() < gt.shape[1] - 1
        grown = ndimage.binary_dilation(masks[i], iterations=INSTANCE_GAP)
        for j in range(i + 1, n):
            assert not (grown & masks[j]).any()


def test_placement_failure_is_explicit(vocab):
    prompt = PromptSpec(targets={1: 30})
    with pytest.raises(PlacementError):
        generate_scene(prompt, seed=0, vocab=vocab, canvas=(32, 32), max_restarts=3)


def test_unknown_class_rejected(vocab):
    with pytest.raises(KeyError):
        generate_scene(PromptSpec(targets={99: 1}), seed=0, vocab=vocab)


def test_prompt_spec_validation():
    with pytest.raises(ValueError):
        PromptSpec(targets={})
    with pytest.raises(ValueError):
        PromptSpec(targets={0: 0})


def test_shape_masks_have_expected_symmetry():
    circle = render_shape_mask("circle", (10, 10), 5, (21, 21))
    np.testing.assert_array_equal(circle, circle[::-1])
    np.testing.assert_array_equal(circle, circle[:, ::-1])
    square = render_shape_mask("square", (10, 10), 5, (21, 21))
    assert square.sum() == 11 * 11
    triangle = render_shape_mask("triangle", (10, 10), 5, (21, 21))
    np.testing.assert_array_equal(triangle, triangle[:, ::-1])


@pytest.mark.slow
def test_ground_truth_fidelity_thousand_scenes(vocab):
    """Counting the gt label grid reproduces every prompt exactly."""
    rng = np.random.default_rng(77)
    for i in range(1000):
        if rng.random() < 0.4:
            classes = rng.choice(vocab.class_ids, size=int(rng.integers(2, 4)), replace=False)
            targets = {int(c): int(rng.integers(1, 4)) for c in classes}
        else:
            targets = {int(rng.choice(vocab.class_ids)): int(rng.integers(1, 11))}
        prompt = PromptSpec(targets=targets, background_id=int(rng.integers(0, 2)))
        _, gt, spec = generate_scene(prompt, seed=1000 + i, vocab=vocab)
        counted: dict[int, int] = {}
        for idx, inst in enumerate(spec.instances):
            assert (gt == idx + 1).any()
            counted[inst.class_id] = counted.get(inst.class_id, 0) + 1
        assert counted == targets
