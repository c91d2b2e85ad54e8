import numpy as np
import pytest
import torch

import oracles
import toydata
from affordance3d.backbone import BackboneConfig, PointBackbone
from affordance3d.cast import (
    CastConfig,
    FinetuneConfig,
    HashTextEncoder,
    PretrainedTextEncoderStub,
    Prompt,
    build_model,
    collate,
    feature_propagation,
    finetune,
    load_model,
    loss_dice,
    loss_focal,
    optimizer_groups,
    save_model,
    segment,
    segmentation_loss,
)
from affordance3d.errors import InvalidConfig, InvalidInput, InvalidPrompt
from affordance3d.geometry import PointCloud, make_patches

BB = BackboneConfig.toy(depth=1, embed_dim=32, heads=2, patch_hidden=16, k=64)


def cast_cfg(**kw):
    base = dict(fusion_blocks=2, shared_dim=32, heads=4, text_dim=64, image_dim=32)
    base.update(kw)
    return CastConfig(**base)


@pytest.fixture(scope="module")
def objs():
    return toydata.objects(2)


@pytest.fixture(scope="module")
def samples(objs):
    return toydata.seg_samples(objs, BB)


# prompts


def test_prompt_kind_validation():
    assert Prompt.build(np.ones(3)).kind == "text"
    assert Prompt.build(None, np.ones(3)).kind == "image"
    assert Prompt.build(np.ones(3), np.ones(3)).modalities == ("text", "image")
    assert Prompt("none").modalities == ()
    with pytest.raises(InvalidPrompt):
        Prompt("text")
    with pytest.raises(InvalidPrompt):
        Prompt("audio")


def test_hash_text_encoder():
    enc = HashTextEncoder()
    a = enc.encode("grasp the handle")
    np.testing.assert_array_equal(a, HashTextEncoder().encode("Grasp  the HANDLE!"))
    assert abs(np.linalg.norm(a) - 1) < 1e-12
    assert not np.allclose(a, enc.encode("sit on the seat"))
    with pytest.raises(InvalidPrompt):
        enc.encode("  ")
    with pytest.raises(NotImplementedError):
        PretrainedTextEncoderStub().encode("x")


# token projection and fusion


def _model(**kw):
    torch.manual_seed(0)
    return build_model(BB, cast_cfg(**kw))


def test_sequence_lengths():
    model = _model()
    tokens = torch.randn(1, 64, 32)
    text, image = torch.randn(1, 64), torch.randn(1, 32)
    assert model.project_tokens(tokens, text, image)[0].shape[1] == 66
    assert model.project_tokens(tokens)[0].shape[1] == 64
    for t, i, q in [(text, None, 1), (None, image, 1), (text, image, 2), (None, None, 0)]:
        seq, count = model.project_tokens(tokens, t, i)
        assert count == q and model.fuse(seq).shape == seq.shape


def test_modality_embeddings_separate_identical_features():
    model = _model(text_dim=32, image_dim=32)
    with torch.no_grad():
        model.proj_img.load_state_dict(model.proj_text.state_dict())
    f = torch.randn(1, 32)
    tokens = torch.randn(1, 4, 32)
    t = model.project_tokens(tokens, text=f)[0][:, 0]
    i = model.project_tokens(tokens, image=f)[0][:, 0]
    assert not torch.allclose(t, i)
    with torch.no_grad():
        model.E_text.zero_()
        model.E_img.zero_()
    t = model.project_tokens(tokens, text=f)[0][:, 0]
    i = model.project_tokens(tokens, image=f)[0][:, 0]
    torch.testing.assert_close(t, i)


def test_zeroed_value_path_is_identity():
    model = _model()
    with torch.no_grad():
        for blk in model.blocks:
            for lin in (blk.attn.proj, blk.mlp[-1]):
                lin.weight.zero_()
                lin.bias.zero_()
    seq = torch.randn(2, 10, 32)
    torch.testing.assert_close(model.fuse(seq), seq, rtol=0, atol=0)


# feature propagation


def test_propagation_coincident_point_takes_patch_feature():
    pts = np.random.default_rng(0).standard_normal((40, 3))
    patches = make_patches(PointCloud(pts), 6, 4)
    feats = np.random.default_rng(1).standard_normal((6, 5))
    out = feature_propagation(feats, patches, pts)
    np.testing.assert_allclose(out[patches.center_indices], feats, atol=1e-4)


def test_propagation_constant_features():
    pts = np.random.default_rng(0).standard_normal((40, 3))
    patches = make_patches(PointCloud(pts), 6, 4)
    out = feature_propagation(np.tile([1.5, -2.0], (6, 1)), patches, pts)
    np.testing.assert_allclose(out, np.tile([1.5, -2.0], (40, 1)), atol=1e-12)


def test_propagation_matches_loop_oracle():
    rng = np.random.default_rng(3)
    for _ in range(10):
        pts = rng.standard_normal((30, 3))
        patches = make_patches(PointCloud(pts), 7, 3)
        feats = rng.standard_normal((7, 4))
        ref = oracles.propagate(pts, patches.centers, feats)
        np.testing.assert_allclose(feature_propagation(feats, patches, pts), ref, atol=1e-6)


# losses


def test_focal_limits():
    assert float(loss_focal(torch.tensor([40.0, -40.0]), torch.tensor([1.0, 0.0]))) < 1e-12
    with pytest.raises(InvalidInput):
        loss_focal(torch.zeros(0), torch.zeros(0))


def test_dice_limits():
    g = (torch.rand(10000) > 0.5).double()
    assert float(loss_dice(g, g)) < 1e-3
    with pytest.raises(InvalidInput):
        loss_dice(torch.zeros(0), torch.zeros(0))


def test_losses_match_oracles_and_gradients():
    rng = np.random.default_rng(4)
    for _ in range(10):
        n = int(rng.integers(2, 64))
        z = rng.standard_normal(n) * 2
        g = rng.random(n)
        assert abs(float(loss_focal(torch.tensor(z), torch.tensor(g))) - oracles.focal(z, g)) < 1e-6
        s = rng.random(n)
        assert abs(float(loss_dice(torch.tensor(s), torch.tensor(g))) - oracles.dice(s, g)) < 1e-6
        for fn, x in ((lambda v: loss_focal(v, torch.tensor(g)), z), (lambda v: loss_dice(v, torch.tensor(g)), s)):
            t = torch.tensor(x, requires_grad=True)
            fn(t).backward()
            num = oracles.central_difference(lambda v: float(fn(torch.tensor(v))), x)
            assert oracles.relative_error(t.grad.numpy(), num) < 1e-4


def test_dice_averages_per_sample():
    s = torch.rand(3, 20, dtype=torch.float64)
    g = torch.rand(3, 20, dtype=torch.float64)
    per = torch.stack([loss_dice(s[i], g[i]) for i in range(3)]).mean()
    torch.testing.assert_close(loss_dice(s, g), per)


def test_segmentation_loss_weights():
    z, g = torch.randn(30, dtype=torch.float64), torch.rand(30, dtype=torch.float64)
    cfg = cast_cfg(lambda_focal=2.0, lambda_dice=0.5)
    expect = 2.0 * loss_focal(z, g) + 0.5 * loss_dice(torch.sigmoid(z), g)
    torch.testing.assert_close(segmentation_loss(z, g, cfg), expect)


# training


def test_full_profile_learning_rate_groups():
    model = _model()
    groups = optimizer_groups(model, FinetuneConfig())
    lrs = {g["group"]: g["lr"] for g in groups}
    assert lrs == {"backbone": 1e-5, "cast": 1e-4}
    ids = {id(p) for g in groups if g["group"] == "backbone" for p in g["params"]}
    assert ids == {id(p) for p in model.backbone.parameters()}
    assert len({id(p) for g in groups for p in g["params"]}) == len(list(model.parameters()))


def test_frozen_backbone_does_not_move(samples):
    base = PointBackbone(BB)
    before = {f"backbone.{n}": p.clone() for n, p in base.named_parameters()}
    model, _ = finetune(samples, BB, cast_cfg(), FinetuneConfig(epochs=1, batch_size=2, freeze_backbone=True), base)
    for n, p in model.backbone.named_parameters():
        assert torch.equal(before[f"backbone.{n}"], p)


def test_both_groups_update(samples):
    base = PointBackbone(BB)
    torch.manual_seed(0)  # finetune seeds the same way before building its model
    init = build_model(BB, cast_cfg(), base)
    model, _ = finetune(samples, BB, cast_cfg(), FinetuneConfig(epochs=1, batch_size=2, seed=0), base)
    start = dict(init.named_parameters())
    moved = {n.startswith("backbone.") for n, p in model.named_parameters() if not torch.equal(start[n], p)}
    assert moved == {True, False}
    # the caller's backbone is untouched
    assert all(torch.equal(p, q) for p, q in zip(base.parameters(), init.backbone.parameters()))


def test_finetune_deterministic(samples):
    cfg = FinetuneConfig(epochs=2, batch_size=2, seed=3)
    _, h1 = finetune(samples, BB, cast_cfg(), cfg)
    _, h2 = finetune(samples, BB, cast_cfg(), cfg)
    assert h1 == h2


def test_unsupported_prompt_rejected(objs):
    model = _model()
    cloud = objs[0][1]
    with pytest.raises(InvalidPrompt):
        segment(model, cloud, Prompt("image", image_feature=np.ones(32)))
    mask = segment(model, cloud, Prompt("none"))
    assert mask.scores.shape == (2048,)


def test_text_only_benchmark_leaves_image_slot_empty(objs):
    model = _model(prompt_kinds=("text", "image"))
    cloud = objs[0][1]
    mask = segment(model, cloud, Prompt("text", HashTextEncoder().encode("grasp the handle")))
    assert np.isfinite(mask.logits).all()
    assert ((mask.scores > 0) & (mask.scores < 1)).all()
    np.testing.assert_allclose(mask.scores, 1 / (1 + np.exp(-mask.logits)))


def test_segment_permutation_equivariant(objs):
    model = _model()
    cloud = objs[1][1]
    prompt = Prompt("text", HashTextEncoder().encode("sit on the seat"))
    perm = np.random.default_rng(0).permutation(len(cloud))
    a = segment(model, cloud, prompt, start_index=0)
    b = segment(model, cloud.permuted(perm), prompt, start_index=int(np.argmax(perm == 0)))
    np.testing.assert_allclose(b.scores, a.scores[perm], atol=1e-6)


def test_prompt_changes_fused_features(samples):
    model, _ = finetune(samples, BB, cast_cfg(), FinetuneConfig(epochs=2, batch_size=2))
    inputs, _ = collate(samples[:1])
    enc = HashTextEncoder()
    with torch.no_grad():
        tokens = model.backbone.encode(inputs["neighborhoods"], inputs["centers"]).patch_tokens
        outs = []
        for text in ("grasp the handle", "contain liquid inside the body"):
            seq, q = model.project_tokens(tokens, torch.as_tensor(enc.encode(text), dtype=torch.float32)[None])
            outs.append(model.fuse(seq)[:, q:])
    assert (outs[0] - outs[1]).abs().max() > 0


def test_model_round_trip(tmp_path, objs):
    model = _model()
    save_model(tmp_path / "m.npz", model, extra={"note": "x"})
    back, header = load_model(tmp_path / "m.npz")
    assert header["extra"] == {"note": "x"}
    cloud = objs[0][1]
    prompt = Prompt("text", HashTextEncoder().encode("grasp the handle"))
    np.testing.assert_array_equal(segment(model, cloud, prompt).scores, segment(back, cloud, prompt).scores)


def test_backbone_config_mismatch_rejected():
    with pytest.raises(InvalidConfig):
        build_model(BB, cast_cfg(), PointBackbone(BackboneConfig.toy()))
