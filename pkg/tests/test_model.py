"""Model layers: fixtures with known outputs, shape contracts, checkpoints."""
import numpy as np
import pytest

from bikecast.errors import ShapeError, ValidationError
from bikecast.graph import gcn_normalize
from bikecast.model import (
    ArchConfig,
    FusionParams,
    OutputParams,
    TemporalConvParams,
    forward,
    init_params,
    llm_fusion_block,
    load_checkpoint,
    output_layer,
    param_count,
    save_checkpoint,
    spatial_graph_conv,
    st_conv_block,
    temporal_gated_conv,
)
from bikecast.tensor import Tape, Tensor
from bikecast.train import l2_loss

SMALL = ArchConfig(block1=(1, 4, 8), block2=(8, 4, 8))


def rand_graph(rng, n):
    a = rng.uniform(0, 1, size=(n, n))
    a = np.triu(a, 1)
    return gcn_normalize(a + a.T)


# ---------------------------------------------------------------------------
# ArchConfig

def test_arch_config_defaults_are_valid():
    cfg = ArchConfig()
    assert cfg.collapsed_steps == 12 - 4 * 2
    assert cfg.block1 == (1, 16, 64)


def test_arch_config_rejects_block_mismatch():
    with pytest.raises(ValidationError, match="block2 input"):
        ArchConfig(block1=(1, 4, 8), block2=(16, 4, 8))


def test_arch_config_rejects_too_few_steps():
    # M=4, K_t=3 leaves 4 - 8 < 1 surviving steps
    with pytest.raises(ValidationError, match=r"4\*\(kernel_t-1\)"):
        ArchConfig(input_steps=4, kernel_t=3)


def test_arch_config_bottleneck_and_positive_fields():
    with pytest.raises(ValidationError):
        ArchConfig(horizon=0)
    with pytest.raises(ValidationError):
        ArchConfig(block1=(1, 0, 8), block2=(8, 4, 8))


def test_arch_config_dict_round_trip():
    cfg = ArchConfig(block1=(1, 4, 8), block2=(8, 4, 8), use_llm_block=True, embed_dim=32)
    assert ArchConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------------------
# parameter bookkeeping

def test_param_count_matches_enumeration():
    for cfg in (
        SMALL,
        ArchConfig(),
        ArchConfig(block1=(1, 4, 8), block2=(8, 4, 8), use_llm_block=True, embed_dim=24, embed_channels=6),
    ):
        params = init_params(cfg, seed=0)
        total = sum(p.size for _, p in params.named_parameters())
        assert total == param_count(cfg)


def test_init_is_deterministic_and_seed_sensitive():
    a = init_params(SMALL, seed=1)
    b = init_params(SMALL, seed=1)
    c = init_params(SMALL, seed=2)
    for (n1, p1), (_, p2), (_, p3) in zip(
        a.named_parameters(), b.named_parameters(), c.named_parameters()
    ):
        assert np.array_equal(p1.data, p2.data), n1
        if "ln_" not in n1:  # layer norm starts at identity for every seed
            assert not np.array_equal(p1.data, p3.data), n1


def test_layer_norm_initialized_at_identity():
    params = init_params(SMALL, seed=0)
    np.testing.assert_array_equal(params.block1.ln_gain.data, np.ones(8))
    np.testing.assert_array_equal(params.block1.ln_shift.data, np.zeros(8))


def test_residual_map_only_when_widths_differ():
    params = init_params(SMALL, seed=0)
    assert params.block1.tconv1.residual is not None  # 1 -> 4
    names = [n for n, _ in params.named_parameters()]
    assert "block1.tconv1.residual" in names
    same = ArchConfig(block1=(4, 4, 4), block2=(4, 4, 4))
    p2 = init_params(same, seed=0)
    assert p2.block1.tconv1.residual is None


def test_load_data_rejects_bad_shapes():
    params = init_params(SMALL, seed=0)
    state = params.copy_data()
    state["block1.sconv_weight"] = np.zeros((3, 3))
    with pytest.raises(ShapeError, match="sconv_weight"):
        params.load_data(state)
    del state["block1.sconv_weight"]
    with pytest.raises(ValidationError, match="missing"):
        params.load_data(state)


# ---------------------------------------------------------------------------
# layer fixtures with hand-computable outputs

def test_temporal_conv_zero_kernel_is_half_residual(rng):
    """Zero conv weights: P = Q = 0, so out = (0 + x_cropped) * sigmoid(0)."""
    c, k = 3, 3
    x = rng.normal(size=(2, c, 7, 4))
    params = TemporalConvParams(
        kernel=Tensor(np.zeros((2 * c, c, k))),
        bias=Tensor(np.zeros(2 * c)),
        residual=None,
    )
    out = temporal_gated_conv(Tensor(x), params, k)
    np.testing.assert_allclose(out.data, 0.5 * x[:, :, k - 1:, :], atol=1e-15)


def test_temporal_conv_residual_keeps_most_recent_steps(rng):
    # with a saturated gate the output is exactly the cropped input, which
    # pins the crop to the *last* T-K+1 steps rather than the first
    c, k = 2, 3
    x = rng.normal(size=(1, c, 6, 2))
    kernel = np.zeros((2 * c, c, k))
    bias = np.concatenate([np.zeros(c), np.full(c, 50.0)])  # Q saturates at 1
    params = TemporalConvParams(kernel=Tensor(kernel), bias=Tensor(bias), residual=None)
    out = temporal_gated_conv(Tensor(x), params, k)
    np.testing.assert_allclose(out.data, x[:, :, 2:, :], atol=1e-9)


def test_temporal_conv_widening_needs_residual_map(rng):
    x = Tensor(rng.normal(size=(1, 2, 5, 3)))
    params = TemporalConvParams(
        kernel=Tensor(rng.normal(size=(8, 2, 3))),  # c_out = 4 != c_in = 2
        bias=Tensor(np.zeros(8)),
        residual=None,
    )
    with pytest.raises(ShapeError, match="c_in == c_out"):
        temporal_gated_conv(x, params, 3)


def test_spatial_conv_identity_pieces_reduce_to_relu(rng):
    """A_norm = I and W = I turn the layer into relu(x + b)."""
    n, c = 4, 3
    x = rng.normal(size=(2, c, 5, n))
    b = rng.normal(size=c)
    out = spatial_graph_conv(Tensor(x), Tensor(np.eye(n)), Tensor(np.eye(c)), Tensor(b))
    np.testing.assert_allclose(out.data, np.maximum(x + b[None, :, None, None], 0.0), atol=1e-12)


def test_spatial_conv_node_count_mismatch():
    with pytest.raises(ShapeError, match="nodes"):
        spatial_graph_conv(
            Tensor(np.ones((1, 2, 3, 4))), Tensor(np.eye(5)),
            Tensor(np.eye(2)), Tensor(np.zeros(2)),
        )


def test_st_conv_block_output_is_normalized(rng):
    cfg = SMALL
    params = init_params(cfg, seed=3)
    a = rand_graph(rng, 5)
    x = Tensor(rng.normal(size=(2, 1, 12, 5)))
    out = st_conv_block(x, params.block1, Tensor(a), cfg.kernel_t)
    assert out.shape == (2, 8, 12 - 2 * 2, 5)
    # layer norm leaves each (batch, time) slice standardized over (channel, node);
    # variance lands just under 1 because of the epsilon inside the rsqrt
    np.testing.assert_allclose(out.data.mean(axis=(1, 3)), 0.0, atol=1e-6)
    np.testing.assert_allclose(out.data.var(axis=(1, 3)), 1.0, atol=1e-2)


def test_fusion_zero_embeddings_add_nothing(rng):
    """E = 0 means e = relu(0 @ proj) = 0; only the mix of h and bias remain."""
    n, c_out, c_e, d_e = 4, 6, 3, 10
    h = rng.normal(size=(2, c_out, 2, n))
    params = FusionParams(
        proj=Tensor(rng.normal(size=(d_e, c_e))),
        mix=Tensor(rng.normal(size=(c_out + c_e, c_out))),
        mix_bias=Tensor(rng.normal(size=c_out)),
    )
    out = llm_fusion_block(Tensor(h), Tensor(np.zeros((n, d_e))), params)
    # oracle: concat([h, zeros]) @ mix == h @ mix[:c_out]
    expect = np.einsum("bitv,io->botv", h, params.mix.data[:c_out])
    expect = np.maximum(expect + params.mix_bias.data[None, :, None, None], 0.0)
    np.testing.assert_allclose(out.data, expect, atol=1e-12)


def test_fusion_embedding_dim_checked(rng):
    params = FusionParams(
        proj=Tensor(rng.normal(size=(10, 3))),
        mix=Tensor(rng.normal(size=(9, 6))),
        mix_bias=Tensor(np.zeros(6)),
    )
    with pytest.raises(ValidationError, match="dimension"):
        llm_fusion_block(
            Tensor(rng.normal(size=(1, 6, 2, 4))),
            Tensor(np.zeros((4, 7))),  # D_e = 7 != 10
            params,
        )
    with pytest.raises(ShapeError, match="nodes"):
        llm_fusion_block(
            Tensor(rng.normal(size=(1, 6, 2, 4))),
            Tensor(np.zeros((5, 10))),  # 5 rows for 4 nodes
            params,
        )


def test_fusion_is_constant_over_batch_and_time(rng):
    """The embedding contribution must be the same at every (batch, time)."""
    n, c_out, c_e, d_e = 3, 4, 2, 6
    e_rows = rng.normal(size=(n, d_e))
    params = FusionParams(
        proj=Tensor(rng.normal(size=(d_e, c_e))),
        mix=Tensor(np.vstack([np.zeros((c_out, c_out)), rng.normal(size=(c_e, c_out))])),
        mix_bias=Tensor(np.zeros(c_out)),
    )
    h = Tensor(rng.normal(size=(2, c_out, 3, n)))  # ignored by the zeroed mix rows
    out = llm_fusion_block(h, Tensor(e_rows), params).data
    for b in range(2):
        for t in range(3):
            np.testing.assert_allclose(out[b, :, t, :], out[0, :, 0, :], atol=1e-12)


def test_output_layer_collapses_time_and_maps_horizons(rng):
    c, t_prime, n, horizon = 5, 4, 3, 2
    params = OutputParams(
        collapse_kernel=Tensor(rng.normal(size=(c, c, t_prime))),
        collapse_bias=Tensor(rng.normal(size=c)),
        fc_weight=Tensor(rng.normal(size=(c, horizon))),
        fc_bias=Tensor(rng.normal(size=horizon)),
    )
    h = rng.normal(size=(2, c, t_prime, n))
    out = output_layer(Tensor(h), params)
    assert out.shape == (2, horizon, n)
    # node-shared fc: compute one (b, v) cell by hand
    z = np.zeros(c)
    for o in range(c):
        z[o] = params.collapse_bias.data[o] + sum(
            params.collapse_kernel.data[o, i, k] * h[1, i, k, 2]
            for i in range(c) for k in range(t_prime)
        )
    expect = z @ params.fc_weight.data + params.fc_bias.data
    np.testing.assert_allclose(out.data[1, :, 2], expect, atol=1e-12)


# ---------------------------------------------------------------------------
# full forward

def test_forward_shapes(rng):
    n = 5
    x = Tensor(rng.normal(size=(3, 12, n)))
    a = Tensor(rand_graph(rng, n))
    params = init_params(SMALL, seed=0)
    out = forward(x, params, a, None, SMALL)
    assert out.shape == (3, SMALL.horizon, n)


def test_forward_with_fusion(rng):
    cfg = ArchConfig(block1=(1, 4, 8), block2=(8, 4, 8), use_llm_block=True,
                     embed_dim=16, embed_channels=4)
    n = 4
    params = init_params(cfg, seed=0)
    out = forward(
        Tensor(rng.normal(size=(2, 12, n))),
        params,
        Tensor(rand_graph(rng, n)),
        Tensor(rng.normal(size=(n, 16))),
        cfg,
    )
    assert out.shape == (2, 3, n)


def test_forward_validates_inputs(rng):
    params = init_params(SMALL, seed=0)
    a = Tensor(rand_graph(rng, 4))
    with pytest.raises(ShapeError, match="steps"):
        forward(Tensor(rng.normal(size=(1, 10, 4))), params, a, None, SMALL)
    with pytest.raises(ShapeError, match="propagation"):
        forward(Tensor(rng.normal(size=(1, 12, 5))), params, a, None, SMALL)
    llm_cfg = ArchConfig(block1=(1, 4, 8), block2=(8, 4, 8), use_llm_block=True, embed_dim=8)
    llm_params = init_params(llm_cfg, seed=0)
    with pytest.raises(ValidationError, match="embeddings"):
        forward(Tensor(rng.normal(size=(1, 12, 4))), llm_params, a, None, llm_cfg)
    with pytest.raises(ValidationError, match="fusion"):
        forward(Tensor(rng.normal(size=(1, 12, 4))), params, a,
                Tensor(np.zeros((4, 8))), llm_cfg)


def test_every_parameter_receives_gradient(rng):
    cfg = ArchConfig(block1=(1, 4, 8), block2=(8, 4, 8), use_llm_block=True,
                     embed_dim=12, embed_channels=4)
    n = 4
    params = init_params(cfg, seed=0)
    x = Tensor(rng.normal(size=(2, 12, n)))
    a = Tensor(rand_graph(rng, n))
    e = Tensor(rng.normal(size=(n, 12)))
    y = Tensor(rng.normal(size=(2, 3, n)))
    with Tape() as tape:
        loss = l2_loss(forward(x, params, a, e, cfg), y)
    tape.backward(loss)
    for name, p in params.named_parameters():
        assert p.grad is not None, name
        assert p.grad.shape == p.data.shape, name
        assert np.isfinite(p.grad).all(), name


def test_frozen_embeddings_get_no_gradient(rng):
    cfg = ArchConfig(block1=(1, 4, 8), block2=(8, 4, 8), use_llm_block=True, embed_dim=8)
    n = 4
    params = init_params(cfg, seed=0)
    e = Tensor(rng.normal(size=(n, 8)))  # requires_grad defaults to False
    with Tape() as tape:
        loss = l2_loss(
            forward(Tensor(rng.normal(size=(1, 12, n))), params, Tensor(rand_graph(rng, n)), e, cfg),
            Tensor(rng.normal(size=(1, 3, n))),
        )
    tape.backward(loss)
    assert e.grad is None


def test_forward_batch_consistency(rng):
    """Running two windows together equals running them separately."""
    n = 4
    params = init_params(SMALL, seed=5)
    a = Tensor(rand_graph(rng, n))
    xs = rng.normal(size=(2, 12, n))
    both = forward(Tensor(xs), params, a, None, SMALL).data
    one = forward(Tensor(xs[:1]), params, a, None, SMALL).data
    two = forward(Tensor(xs[1:]), params, a, None, SMALL).data
    np.testing.assert_allclose(both, np.concatenate([one, two]), atol=1e-12)


def test_forward_is_node_permutation_equivariant(rng):
    """Relabeling nodes permutes forecasts; nothing in the net is node-specific."""
    n = 6
    cfg = ArchConfig(block1=(1, 4, 8), block2=(8, 4, 8), use_llm_block=True,
                     embed_dim=10, embed_channels=4)
    params = init_params(cfg, seed=2)
    x = rng.normal(size=(2, 12, n))
    a = rand_graph(rng, n)
    e = rng.normal(size=(n, 10))
    base = forward(Tensor(x), params, Tensor(a), Tensor(e), cfg).data
    perm = rng.permutation(n)
    permed = forward(
        Tensor(x[:, :, perm]),
        params,
        Tensor(a[np.ix_(perm, perm)]),
        Tensor(e[perm]),
        cfg,
    ).data
    np.testing.assert_allclose(permed, base[:, :, perm], atol=1e-8)


# ---------------------------------------------------------------------------
# checkpoints

def test_checkpoint_round_trip(tmp_path, rng):
    cfg = ArchConfig(block1=(1, 4, 8), block2=(8, 4, 8), use_llm_block=True,
                     embed_dim=16, embed_channels=4)
    params = init_params(cfg, seed=9)
    path = str(tmp_path / "model.bkc")
    save_checkpoint(
        path, params, cfg, seed=9,
        meta={"note": "fixture"},
        extra_arrays=[("norm_mean", np.array([1.0, 2.0]))],
    )
    p2, cfg2, seed2, meta2, extras = load_checkpoint(path)
    assert cfg2 == cfg
    assert seed2 == 9
    assert meta2["note"] == "fixture"
    np.testing.assert_array_equal(extras["norm_mean"], [1.0, 2.0])
    for (n1, t1), (_, t2) in zip(params.named_parameters(), p2.named_parameters()):
        np.testing.assert_array_equal(t1.data, t2.data), n1

    # loaded params produce the same forecast
    n = 4
    x = Tensor(rng.normal(size=(1, 12, n)))
    a = Tensor(rand_graph(rng, n))
    e = Tensor(rng.normal(size=(n, 16)))
    np.testing.assert_array_equal(
        forward(x, params, a, e, cfg).data, forward(x, p2, a, e, cfg2).data
    )


def test_checkpoint_rejects_tampered_manifest(tmp_path):
    from bikecast.container import read_container, write_container

    cfg = SMALL
    path = str(tmp_path / "model.bkc")
    save_checkpoint(path, init_params(cfg, seed=0), cfg, seed=0)
    kind, arrays, meta = read_container(path)
    meta["manifest"] = meta["manifest"][:-1]
    write_container(path, kind, list(arrays.items()), meta)
    with pytest.raises(ValidationError, match="manifest"):
        load_checkpoint(path)


def test_checkpoint_rejects_truncated_payload(tmp_path):
    from bikecast.container import read_container, write_container

    cfg = SMALL
    path = str(tmp_path / "model.bkc")
    save_checkpoint(path, init_params(cfg, seed=0), cfg, seed=0)
    kind, arrays, meta = read_container(path)
    dropped = dict(arrays)
    del dropped["param.output.fc_bias"]
    write_container(path, kind, list(dropped.items()), meta)
    with pytest.raises(ValidationError, match="fc_bias"):
        load_checkpoint(path)
