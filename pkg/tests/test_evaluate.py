import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from densedino.encoder import EncoderConfig, VisionTransformer
from densedino.evaluate import (
    EvalConfig,
    FeatureBank,
    attention_maps,
    evaluate_encoder,
    extract_features,
    knn_classify,
    knn_predict,
    miou_from_labels,
    param_digest,
    patch_labels,
    render_full,
    train_probe,
    upsample_patches,
)
from densedino.scenes import SceneConfig, split_scenes

CFG = EncoderConfig(image_res=16, patch_size=8, depth=1, embed_dim=16, heads=2, out_dim=8, bottleneck_dim=8)


def encoder(cfg=CFG, seed=0):
    torch.manual_seed(seed)
    return VisionTransformer(cfg)


# --- k-NN ----------------------------------------------------------------------


def test_bank_rows_are_unit_norm():
    bank = FeatureBank.build(np.random.default_rng(0).normal(size=(10, 5)) * 7, np.arange(10) % 3)
    assert np.allclose(np.linalg.norm(bank.features, axis=1), 1, atol=1e-6)


def test_single_item_bank():
    bank = FeatureBank.build([[1.0, 0.0]], [2])
    for q in ([0.0, 1.0], [-1.0, 0.3], [5.0, 5.0]):
        assert knn_classify(q, bank) == 2


def test_exact_match_dominates():
    eye = np.eye(30)
    bank = FeatureBank.build(eye, np.arange(30) % 4)
    assert knn_classify(eye[13], bank, k=20) == 13 % 4


def test_hand_computed_vote():
    x = np.array([1.0, 0.0])
    bank = FeatureBank.build([x, x, -x], [0, 0, 1])
    assert knn_classify(x, bank, k=3) == 0
    # Label 1 wins when its single neighbour is the query and the others are opposite.
    assert knn_classify(-x, bank, k=3) == 1


def test_ties_go_to_smallest_label():
    bank = FeatureBank.build([[1.0, 0.0], [1.0, 0.0]], [3, 1])
    assert knn_classify([1.0, 0.0], bank, k=2) == 1


def test_empty_bank_raises():
    with pytest.raises(ValueError):
        knn_predict(np.ones((1, 2)), FeatureBank.build(np.zeros((0, 2)), []))


def test_knn_deterministic_across_thread_counts():
    rng = np.random.default_rng(0)
    bank = FeatureBank.build(rng.normal(size=(200, 8)), rng.integers(0, 3, 200))
    q = rng.normal(size=(50, 8))
    a = knn_predict(q, bank)
    old = torch.get_num_threads()
    try:
        torch.set_num_threads(1)
        b = knn_predict(q, bank)
    finally:
        torch.set_num_threads(old)
    assert np.array_equal(a, b)


# --- probe -----------------------------------------------------------------------


def test_probe_separable_features():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 4, size=(32, 9))
    feats = torch.from_numpy(np.eye(4)[labels] * 3.0).float()
    probe = train_probe(feats, labels, 4, epochs=60, lr=0.05, batch_size=8)
    pred = probe.predict(feats).numpy()
    assert (pred == labels).mean() == 1.0
    assert miou_from_labels(pred, labels, 4).miou == 1.0


def test_probe_random_labels_stay_at_chance():
    rng = np.random.default_rng(1)
    n_img, n_patch, c = 100, 16, 4
    feats = torch.from_numpy(rng.normal(size=(n_img, n_patch, 8))).float()
    train_labels = rng.integers(0, c, size=(n_img, n_patch))
    probe = train_probe(feats, train_labels, c, epochs=20, lr=1e-2)
    test_feats = torch.from_numpy(rng.normal(size=(n_img, n_patch, 8))).float()
    test_labels = rng.integers(0, c, size=(n_img, n_patch))
    acc = (probe.predict(test_feats).numpy() == test_labels).mean()
    n = test_labels.size
    sigma = math.sqrt(0.25 * 0.75 / n)
    assert abs(acc - 1 / c) <= 3 * sigma


def test_probe_zero_epochs_is_initialisation():
    feats = torch.randn(4, 9, 6)
    probe = train_probe(feats, np.zeros((4, 9), dtype=int), 3, epochs=0)
    assert (probe.linear.weight == 0).all() and (probe.linear.bias == 0).all()


def test_patch_labels_majority():
    mask = np.zeros((1, 4, 4), dtype=np.int64)
    mask[0, :2, :2] = [[1, 1], [1, 0]]
    mask[0, 2:, 2:] = [[2, 3], [3, 2]]  # tie between 2 and 3
    assert patch_labels(mask, 2, 4).tolist() == [[1, 0, 0, 2]]


# --- mIoU -------------------------------------------------------------------------


def test_miou_examples():
    truth = np.array([[0, 0], [1, 1]])
    assert miou_from_labels(truth, truth, 2).miou == 1.0
    assert miou_from_labels(1 - truth, truth, 2).miou == 0.0
    rep = miou_from_labels(np.array([[0, 1], [1, 1]]), truth, 2)
    assert rep.iou[0] == pytest.approx(0.5) and rep.iou[1] == pytest.approx(2 / 3)
    assert rep.miou == pytest.approx(7 / 12)


def test_absent_classes_excluded():
    truth = np.array([0, 0, 2, 2])
    rep = miou_from_labels(truth, truth, 5)
    assert set(rep.iou) == {0, 2} and rep.miou == 1.0


@settings(max_examples=30)
@given(st.integers(0, 2**31), st.permutations(range(4)))
def test_miou_bounds_and_permutation_invariance(seed, perm):
    rng = np.random.default_rng(seed)
    truth = rng.integers(0, 4, 50)
    pred = rng.integers(0, 4, 50)
    rep = miou_from_labels(pred, truth, 4)
    assert all(0 <= v <= 1 for v in rep.iou.values())
    perm = np.array(perm)
    assert miou_from_labels(perm[pred], perm[truth], 4).miou == pytest.approx(rep.miou, abs=1e-12)


def test_nearest_upsampling():
    pred = np.array([[[1, 2], [3, 0]]])
    up = upsample_patches(pred, 3)
    assert up.shape == (1, 6, 6) and (up[0, :3, :3] == 1).all() and (up[0, 3:, 3:] == 0).all()


# --- attention maps --------------------------------------------------------------


def test_attention_map_shape_and_mass():
    enc = encoder()
    img = np.random.default_rng(0).random((16, 16, 3)).astype(np.float32)
    maps = attention_maps(enc, img)
    assert maps.shape == (2, 2, 2)
    attn = enc.last_attention(torch.from_numpy(img[None]))[0]
    assert (maps >= 0).all()
    assert np.allclose(maps.reshape(2, -1).sum(1) + attn[:, 0, 0].numpy(), 1.0, atol=1e-6)


def test_identity_attention_gives_uniform_maps():
    enc = encoder(EncoderConfig(image_res=32, patch_size=8, depth=1, embed_dim=16, heads=2, out_dim=8, bottleneck_dim=8))
    with torch.no_grad():
        enc.blocks[0].attn.qkv.weight[:32].zero_()
        enc.blocks[0].attn.qkv.bias[:32].zero_()
    img = np.random.default_rng(0).random((32, 32, 3)).astype(np.float32)
    maps = attention_maps(enc, img)
    assert np.allclose(maps, 1 / 17, atol=1e-7)


# --- frozen contract and end-to-end ------------------------------------------------


def test_evaluation_leaves_encoder_untouched():
    enc = encoder()
    scenes = split_scenes(0, "train", 12, SceneConfig(size=32, size_range=(4.0, 8.0)))
    digest = param_digest(enc)
    imgs, _ = render_full(scenes, 16)
    before = extract_features(enc, imgs)[0].clone()
    rep = evaluate_encoder(enc, scenes[:8], scenes[8:], 4, EvalConfig(probe_epochs=2, probe_batch=4))
    assert param_digest(enc) == digest
    assert torch.equal(extract_features(enc, imgs)[0], before)
    assert 0 <= rep.knn_acc <= 1 and 0 <= rep.miou <= 1
    again = evaluate_encoder(enc, scenes[:8], scenes[8:], 4, EvalConfig(probe_epochs=2, probe_batch=4))
    assert again == rep


def test_param_digest_detects_changes():
    enc = encoder()
    d = param_digest(enc)
    with torch.no_grad():
        enc.cls_token[0] += 1e-6
    assert param_digest(enc) != d


def test_render_full_shapes():
    scenes = split_scenes(0, "test", 2, SceneConfig(size=32, size_range=(4.0, 8.0)))
    imgs, masks = render_full(scenes, 16)
    assert imgs.shape == (2, 16, 16, 3) and masks.shape == (2, 16, 16)
    assert set(np.unique(masks)) <= {0, 1, 2, 3}
