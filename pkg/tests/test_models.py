import numpy as np
import pytest

from painlarks import tensor as T
from painlarks.graph import FacialGraph, build_facial_adjacency
from painlarks.layers import stacked_lstm_param_count
from painlarks.models import (ConfigError, ConvNextBackbone, ConvNextBlock, ConvNextConfig, HybridNet,
                              ModelConfig, StgcnBlock, StgcnBlockConfig, build_model,
                              convnext_backbone_param_count, convnext_block_forward, hybrid_forward,
                              load_checkpoint, model_param_count, parse_blocks, save_checkpoint,
                              stgcn_block_forward, stgcn_block_param_count, stgcn_forward,
                              stgcn_lstm_forward)
from painlarks.tensor import ShapeError, Tensor

TOY_BLOCKS = "2:4,4:4,4:4"


def toy(kind="stgcn", **extra):
    return ModelConfig.from_flat({"kind": kind, "blocks": TOY_BLOCKS, "lstm_hidden": "4", **extra})


def path_graph(n):
    return FacialGraph.from_edges(n, [(i, i + 1) for i in range(n - 1)])


@pytest.fixture(scope="module")
def face():
    return build_facial_adjacency()


@pytest.fixture(scope="module")
def clip():
    return np.random.default_rng(0).normal(size=(20, 68, 2))


# ---------------------------------------------------------------- STGCN block


def test_block_paper_shape(face, clip):
    block = StgcnBlock(StgcnBlockConfig(2, 32), np.random.default_rng(0))
    with T.no_grad():
        out = stgcn_block_forward(block, face, clip)
    assert out.shape == (20, 68, 32)


def test_block_dead_main_path_leaves_residual(face, clip):
    block = StgcnBlock(StgcnBlockConfig(2, 8, use_gate=False), np.random.default_rng(1))
    for mod in (block.gcn, block.tc, block.convlstm):
        for p in mod.parameters():
            p.data[...] = 0.0
    out = stgcn_block_forward(block, face, clip).data
    fused = np.concatenate([np.zeros((20, 68, 8)), clip @ block.residual.W.data], axis=-1)
    proj = fused @ block.proj.W.data + block.proj.b.data
    expected = T.layer_norm(Tensor(proj), block.norm.gamma, block.norm.beta).data
    assert np.allclose(out, expected, atol=1e-12)


def test_block_all_zero_weights_gives_beta(face, clip):
    block = StgcnBlock(StgcnBlockConfig(2, 8, use_gate=False), np.random.default_rng(1))
    for p in block.parameters():
        p.data[...] = 0.0
    assert np.all(stgcn_block_forward(block, face, clip).data == 0)


def test_block_gradcheck_small():
    rng = np.random.default_rng(2)
    g = path_graph(3)
    block = StgcnBlock(StgcnBlockConfig(2, 3, temporal_kernel=3), rng)
    X = Tensor(rng.normal(size=(4, 3, 2)), requires_grad=True)
    params = [X] + block.parameters()
    assert T.gradcheck(lambda *_: block(g.A_hat, X), params, rng=rng) < 1e-4


def test_block_node_mismatch(face):
    block = StgcnBlock(StgcnBlockConfig(2, 4), np.random.default_rng(0))
    with pytest.raises(ShapeError):
        stgcn_block_forward(block, face, np.zeros((20, 60, 2)))


def test_block_param_count_formula():
    rng = np.random.default_rng(0)
    for ci, co, k, gate in [(2, 32, 9, True), (32, 64, 9, True), (5, 3, 3, False)]:
        cfg = StgcnBlockConfig(ci, co, k, gate)
        assert StgcnBlock(cfg, rng).num_parameters() == stgcn_block_param_count(cfg)


# ---------------------------------------------------------------- STGCN models


def test_stgcn_logits_shape_and_softmax(clip):
    for kind in ("stgcn", "stgcn_lstm"):
        model = build_model(toy(kind), seed=0)
        with T.no_grad():
            logits = stgcn_forward(model, clip)
            batch = model(np.stack([clip, clip]))
        assert logits.shape == (2,) and batch.shape == (2, 2)
        assert abs(T.softmax(logits).data.sum() - 1) <= 1e-12


def test_default_config_three_blocks_to_two_logits(clip):
    model = build_model(ModelConfig(kind="stgcn"), seed=0)
    assert [(b.cfg.c_in, b.cfg.c_out) for b in model.blocks] == [(2, 32), (32, 64), (64, 64)]
    with T.no_grad():
        assert model(clip).shape == (2,)


def test_stgcn_permutation_invariance(face, clip):
    perm = np.random.default_rng(3).permutation(68)
    cfg = toy("stgcn")
    a = build_model(cfg, face, seed=4)
    b = build_model(cfg, face.permuted(perm), seed=4)
    moved = np.empty_like(clip)
    moved[:, perm] = clip
    with T.no_grad():
        assert np.max(np.abs(a(clip).data - b(moved).data)) <= 1e-9


def test_stgcn_non_degenerate(clip):
    model = build_model(toy("stgcn"), seed=5)
    one_hot = np.zeros((20, 68, 2))
    one_hot[:, 10, 0] = 1.0
    with T.no_grad():
        assert not np.allclose(model(np.zeros((20, 68, 2))).data, model(one_hot).data)


def test_stgcn_lstm_param_count_difference():
    for blocks, H in [(TOY_BLOCKS, 4), ("2:32,32:64,64:64", 64), ("2:8,8:16", 5)]:
        base = ModelConfig.from_flat({"kind": "stgcn", "blocks": blocks, "lstm_hidden": str(H)})
        withl = ModelConfig.from_flat({"kind": "stgcn_lstm", "blocks": blocks, "lstm_hidden": str(H)})
        C = base.blocks[-1].c_out
        n0, n1 = build_model(base).num_parameters(), build_model(withl).num_parameters()
        assert n1 - n0 == stacked_lstm_param_count(C, H) + (2 * H + 2) - (2 * C + 2)
        assert n1 > n0


def test_stgcn_lstm_sees_time_order(clip):
    model = build_model(toy("stgcn_lstm"), seed=6)
    with T.no_grad():
        fwd = stgcn_lstm_forward(model, clip).data
        rev = stgcn_lstm_forward(model, clip[::-1].copy()).data
    assert not np.allclose(fwd, rev)


def test_stgcn_wrong_input_shape():
    model = build_model(toy("stgcn"))
    for bad in (np.zeros((19, 68, 2)), np.zeros((20, 68, 3)), np.zeros((20, 67, 2))):
        with pytest.raises(ShapeError):
            model(bad)


@pytest.mark.parametrize("kind", ["stgcn", "stgcn_lstm"])
def test_end_to_end_gradcheck_tiny(kind):
    rng = np.random.default_rng(7)
    cfg = ModelConfig.from_flat({"kind": kind, "blocks": "2:3,3:3", "lstm_hidden": "3",
                                 "temporal_kernel": "3", "n_frames": "4", "num_nodes": "5"})
    model = build_model(cfg, path_graph(5), seed=1)
    X = rng.normal(size=(2, 4, 5, 2))
    assert T.gradcheck(lambda *_: model(X), model.parameters(), samples=50, rng=rng) < 1e-3


# ---------------------------------------------------------------- ConvNeXt


def test_convnext_block_shape_and_identity():
    rng = np.random.default_rng(8)
    block = ConvNextBlock(8, rng)
    x = rng.normal(size=(8, 14, 14))
    with T.no_grad():
        assert convnext_block_forward(block, x).shape == (8, 14, 14)
    for p in block.parameters():
        p.data[...] = 0.0
    assert np.array_equal(convnext_block_forward(block, x).data, x)


def test_convnext_block_gradcheck():
    rng = np.random.default_rng(9)
    block = ConvNextBlock(2, rng)
    x = Tensor(rng.normal(size=(2, 5, 5)), requires_grad=True)
    # two-channel LayerNorm is sharply curved where the channels nearly agree
    err = T.gradcheck(lambda *_: block(x), [x] + block.parameters(), rng=rng, stencil=5)
    assert err < 1e-4


def test_convnext_block_matches_reference():
    rng = np.random.default_rng(10)
    C = 3
    block = ConvNextBlock(C, rng, expansion=2)
    x = rng.normal(size=(C, 9, 9))
    k = block.dw_kernel.data
    pad = np.pad(x, ((0, 0), (3, 3), (3, 3)))
    dw = np.zeros_like(x)
    for c in range(C):
        for i in range(9):
            for j in range(9):
                dw[c, i, j] = np.sum(pad[c, i:i + 7, j:j + 7] * k[c, 0]) + block.dw_bias.data[c]
    y = dw.transpose(1, 2, 0)
    mu = y.mean(-1, keepdims=True)
    y = (y - mu) / np.sqrt(y.var(-1, keepdims=True) + 1e-6) * block.norm.gamma.data + block.norm.beta.data
    from scipy.special import erf
    h = y @ block.pw1.W.data + block.pw1.b.data
    h = 0.5 * h * (1 + erf(h / np.sqrt(2)))
    y = h @ block.pw2.W.data + block.pw2.b.data
    with T.no_grad():
        assert np.allclose(block(x).data, x + y.transpose(2, 0, 1), atol=1e-12)


def test_toy_backbone_output_length():
    cfg = ConvNextConfig((8, 16, 32, 64), (1, 1, 1, 1), image_size=32)
    bb = ConvNextBackbone(cfg, np.random.default_rng(0))
    with T.no_grad():
        out = bb(np.random.default_rng(1).normal(size=(3, 32, 32)))
    assert out.shape == (64,)
    assert bb.trace == [(8, 8, 1), (16, 4, 1), (32, 2, 1), (64, 1, 1)]
    assert bb.num_parameters() == convnext_backbone_param_count(cfg)


def test_backbone_rejects_wrong_size():
    cfg = ConvNextConfig((8, 16, 32, 64), (1, 1, 1, 1), image_size=32)
    with pytest.raises(ShapeError):
        ConvNextBackbone(cfg, np.random.default_rng(0))(np.zeros((3, 64, 64)))
    with pytest.raises(ConfigError):
        ConvNextConfig(image_size=100)


def test_tiny_parameter_count_closed_form():
    assert convnext_backbone_param_count(ConvNextConfig()) == 27_810_432


# ---------------------------------------------------------------- hybrid


def hybrid(variant="plain", D=16, **extra):
    flat = {"kind": "hybrid", "lstm_variant": variant, "feature_dim": str(D), "lstm_hidden": "8", **extra}
    return ModelConfig.from_flat(flat)


def test_hybrid_precomputed_shape():
    model = build_model(hybrid())
    with T.no_grad():
        out = hybrid_forward(model, np.random.default_rng(0).normal(size=(20, 16)))
    assert out.shape == (2,)


def test_hybrid_identical_features_identical_logits():
    model = build_model(hybrid("attention"), seed=3)
    feats = np.random.default_rng(1).normal(size=(20, 16))
    with T.no_grad():
        assert np.array_equal(model(feats).data, model(feats.copy()).data)
        batch = model(np.stack([feats, feats])).data
    assert np.array_equal(batch[0], batch[1])


def test_hybrid_plain_vs_stacked_tied_layer_one():
    plain = build_model(hybrid("plain"), seed=0)
    stacked = build_model(hybrid("stacked"), seed=0)
    stacked.encoder.lstm.load_state_dict(plain.encoder.lstm.state_dict())
    stacked.head.load_state_dict(plain.head.state_dict())
    feats = np.random.default_rng(0).normal(size=(20, 16))
    with T.no_grad():
        assert not np.allclose(plain(feats).data, stacked(feats).data)


def test_hybrid_frame_count_strictness():
    feats = np.zeros((19, 16))
    with pytest.raises(ShapeError):
        build_model(hybrid())(feats)
    lenient = build_model(hybrid(strict_frames="false"))
    with T.no_grad():
        assert lenient(feats).shape == (2,)


def test_hybrid_toy_convnext_images():
    cfg = hybrid("bi", stage_channels="4,8,8,8", stage_blocks="1,1,1,1", image_size="32",
                 backbone="toy_convnext")
    model = build_model(cfg)
    frames = np.random.default_rng(2).normal(size=(20, 3, 32, 32))
    with T.no_grad():
        assert model(frames).shape == (2,)
    with pytest.raises(ShapeError):
        model(np.zeros((20, 16)))


def test_hybrid_needs_feature_dim():
    with pytest.raises(ConfigError):
        HybridNet(ModelConfig(kind="hybrid"), np.random.default_rng(0))


# ---------------------------------------------------------------- config, counts, checkpoints


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(kind="gcn")
    with pytest.raises(ConfigError):
        ModelConfig(num_classes=3)
    with pytest.raises(ConfigError):
        ModelConfig(blocks=tuple(parse_blocks("3:8")))
    with pytest.raises(ConfigError):
        ModelConfig(blocks=tuple(parse_blocks("2:8,4:8")))
    with pytest.raises(ConfigError):
        StgcnBlockConfig(2, 4, temporal_kernel=4)
    with pytest.raises(ConfigError):
        parse_blocks("2-8")


def test_flat_round_trip():
    cfg = hybrid("attention", D=12, backbone="toy_convnext", image_size="64")
    assert ModelConfig.from_flat(cfg.to_flat()) == cfg


@pytest.mark.parametrize("cfg", [
    toy("stgcn"), toy("stgcn_lstm"), ModelConfig(kind="stgcn_lstm"),
    hybrid("plain"), hybrid("bi"), hybrid("attention"), hybrid("stacked"),
    hybrid("stacked", backbone="toy_convnext", stage_channels="8,16,32,64", stage_blocks="1,2,1,1",
           image_size="32"),
])
def test_param_count_formulas_match_runtime(cfg):
    assert build_model(cfg).num_parameters() == model_param_count(cfg)


def test_checkpoint_round_trip(tmp_path, clip):
    model = build_model(toy("stgcn_lstm"), seed=11)
    save_checkpoint(model, tmp_path / "ck")
    names = (tmp_path / "ck" / "manifest.txt").read_text()
    assert "blocks0.convlstm.W" in names and "lstm.lstm2.U" in names
    loaded = load_checkpoint(tmp_path / "ck")
    with T.no_grad():
        assert np.array_equal(loaded(clip).data, model(clip).data)
    assert [n for n, _ in loaded.named_parameters()] == [n for n, _ in model.named_parameters()]


def test_checkpoint_keeps_custom_graph(tmp_path, clip):
    g = build_facial_adjacency(extra_edges=[(27, 8)])
    model = build_model(toy("stgcn"), g, seed=2)
    save_checkpoint(model, tmp_path / "ck")
    assert load_checkpoint(tmp_path / "ck").graph.edges == g.edges


def test_parameter_names_stable_across_builds():
    a = [n for n, _ in build_model(toy("stgcn_lstm"), seed=0).named_parameters()]
    b = [n for n, _ in build_model(toy("stgcn_lstm"), seed=9).named_parameters()]
    assert a == b and len(set(a)) == len(a)
