import numpy as np
import pytest

from hvector import tensor as hv
from hvector.audio import UtteranceFeatures
from hvector.model import (
    ModelConfig,
    _gru_direction,
    build_params,
    embed_batch,
    forward,
    forward_batch,
    forward_baseline,
    frame_attention,
    frame_encode,
    load_checkpoint,
    save_checkpoint,
    segment_attention,
    segment_encode,
)
from hvector.tensor import Tensor


def desk_cfg(mode="hvector", n_speakers=5):
    return ModelConfig.desk(n_speakers, mode=mode)


def random_frags(rng, cfg, batch=3):
    return rng.standard_normal(
        (batch, cfg.n_fragments, cfg.frames_per_fragment, cfg.feat_dim))


def full_frames(cfg, batch):
    return np.full(batch, cfg.n_fragments * cfg.frames_per_fragment)


class TestConfig:
    def test_text_roundtrip(self):
        cfg = ModelConfig.desk(7, mode="xvector_attn")
        assert ModelConfig.from_text(cfg.to_text()) == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown config key"):
            ModelConfig.from_text("n_speakers=3\nwidgets=4\n")

    def test_bad_line_rejected(self):
        with pytest.raises(ValueError, match="key=value"):
            ModelConfig.from_text("n_speakers\n")

    def test_bad_mode_rejected(self):
        with pytest.raises(ValueError, match="unknown mode"):
            ModelConfig(n_speakers=3, mode="zvector")

    def test_bad_dropout_rejected(self):
        with pytest.raises(ValueError, match="dropout"):
            ModelConfig(n_speakers=3, dropout=1.0)

    def test_default_dimensions(self):
        cfg = ModelConfig(n_speakers=100)
        assert cfg.frame_cnn_out == 512
        assert cfg.frame_out_dim == 1024
        assert cfg.seg_cnn_out == 1500
        assert cfg.frames_per_fragment == 30

    def test_comments_and_blanks_ignored(self):
        cfg = ModelConfig(n_speakers=4)
        text = "# saved config\n\n" + cfg.to_text()
        assert ModelConfig.from_text(text) == cfg


class TestBuildParams:
    def test_deterministic_by_seed(self):
        cfg = ModelConfig.tiny()
        a = build_params(cfg, seed=5)
        b = build_params(cfg, seed=5)
        c = build_params(cfg, seed=6)
        for name in a.tensors:
            assert np.array_equal(a[name].data, b[name].data)
        assert not np.array_equal(a["fc1.w"].data, c["fc1.w"].data)

    def test_hvector_shapes(self):
        cfg = desk_cfg()
        p = build_params(cfg, seed=0)
        assert p["frame_conv.w"].shape == (5, 20, 64)
        assert p["gru_f.wz"].shape == (64, 32)
        assert p["gru_b.uh"].shape == (32, 32)
        assert p["frame_att.w0"].shape == (64, 64)
        assert p["frame_att.w1"].shape == (64, 1)
        assert p["seg_conv.w"].shape == (1, 128, 64)
        assert p["seg_att.w0"].shape == (64, 64)
        assert p["fc1.w"].shape == (128, 64)
        assert p["out.w"].shape == (64, 5)

    def test_xvector_shapes(self):
        cfg = desk_cfg(mode="xvector")
        p = build_params(cfg, seed=0)
        assert p["conv1.w"].shape == (5, 20, 64)
        assert p["conv2.w"].shape == (3, 64, 64)
        assert p["conv4.w"].shape == (1, 64, 64)
        assert p["conv5.w"].shape == (1, 64, 64)
        assert p["fc1.w"].shape == (128, 64)
        assert "att.w1" not in p.tensors

    def test_biases_zero_and_gains_one(self):
        p = build_params(ModelConfig.tiny(), seed=2)
        assert np.all(p["frame_conv.b"].data == 0.0)
        assert np.all(p["gru_f.bz"].data == 0.0)
        assert np.all(p["frame_bn.gamma"].data == 1.0)
        assert np.all(p["frame_bn.beta"].data == 0.0)
        assert np.all(p.buffers["frame_bn.var"] == 1.0)

    def test_weight_scale_bound(self):
        p = build_params(ModelConfig.tiny(), seed=3)
        w = p["fc1.w"]
        assert np.max(np.abs(w.data)) <= 1.0 / np.sqrt(w.shape[0])
        conv = p["frame_conv.w"]
        fan_in = conv.shape[0] * conv.shape[1]
        assert np.max(np.abs(conv.data)) <= 1.0 / np.sqrt(fan_in)


class TestForwardShapes:
    def test_hvector_trace(self):
        cfg = desk_cfg()
        p = build_params(cfg, seed=0)
        rng = np.random.default_rng(1)
        frags = random_frags(rng, cfg, batch=3)
        trace = {}
        logits, emb = forward_batch(frags, full_frames(cfg, 3), p, cfg, trace=trace)
        assert logits.shape == (3, 5)
        assert emb.shape == (3, 64)
        assert trace["frame_encoded"].shape == (30, 10, 64)
        assert trace["frame_alpha"].shape == (30, 10)
        assert trace["segments"].shape == (3, 10, 128)
        assert trace["segment_encoded"].shape == (3, 10, 64)
        assert trace["seg_alpha"].shape == (3, 10)
        assert trace["utterance_vector"].shape == (3, 128)

    def test_xvector_trace(self):
        cfg = desk_cfg(mode="xvector")
        p = build_params(cfg, seed=0)
        rng = np.random.default_rng(1)
        frags = random_frags(rng, cfg, batch=2)
        trace = {}
        logits, emb = forward_batch(frags, np.array([98, 98]), p, cfg, trace=trace)
        assert logits.shape == (2, 5)
        assert emb.shape == (2, 64)
        assert trace["frame_encoded"].shape == (2, 98, 64)
        assert trace["frame_alpha"] is None
        assert trace["utterance_vector"].shape == (2, 128)

    def test_single_utterance(self):
        cfg = desk_cfg()
        p = build_params(cfg, seed=0)
        rng = np.random.default_rng(2)
        u = UtteranceFeatures(fragments=random_frags(rng, cfg, batch=1)[0],
                              n_frames=97)
        logits, emb = forward(u, p, cfg)
        assert logits.shape == (5,)
        assert emb.shape == (64,)

    def test_wrong_rank_rejected(self):
        cfg = desk_cfg()
        p = build_params(cfg, seed=0)
        with pytest.raises(ValueError, match=r"\(B, N, M, F\)"):
            forward_batch(np.zeros((10, 10, 20)), np.array([98]), p, cfg)

    def test_wrong_feat_dim_rejected(self):
        cfg = desk_cfg()
        p = build_params(cfg, seed=0)
        with pytest.raises(ValueError, match="feat_dim"):
            forward_batch(np.zeros((1, 10, 10, 13)), np.array([98]), p, cfg)

    def test_baseline_needs_uniform_frame_counts(self):
        cfg = desk_cfg(mode="xvector")
        p = build_params(cfg, seed=0)
        with pytest.raises(ValueError, match="uniform"):
            forward_batch(np.zeros((2, 10, 10, 20)), np.array([98, 97]), p, cfg)

    def test_forward_baseline_rejects_hvector_config(self):
        cfg = desk_cfg()
        p = build_params(cfg, seed=0)
        u = UtteranceFeatures(fragments=np.zeros((10, 10, 20)), n_frames=98)
        with pytest.raises(ValueError, match="xvector"):
            forward_baseline(u, p, cfg)


class TestDegenerateCases:
    @pytest.mark.parametrize("mode", ["hvector", "xvector", "xvector_attn"])
    def test_all_zero_parameters_give_zero_outputs(self, mode):
        cfg = desk_cfg(mode=mode)
        p = build_params(cfg, seed=0)
        for t in p.tensors.values():
            t.data[...] = 0.0
        rng = np.random.default_rng(3)
        frags = random_frags(rng, cfg, batch=2)
        logits, emb = forward_batch(frags, full_frames(cfg, 2), p, cfg)
        assert np.all(logits.data == 0.0)
        assert np.all(emb.data == 0.0)

    def test_zero_scorer_gives_uniform_attention(self):
        cfg = desk_cfg()
        p = build_params(cfg, seed=4)
        p["frame_att.w1"].data[...] = 0.0
        rng = np.random.default_rng(5)
        h = rng.standard_normal((4, 9, cfg.frame_out_dim))
        pooled, alpha = frame_attention(h, p)
        assert np.array_equal(alpha.data, np.full((4, 9), 1.0 / 9.0))
        expected = hv.stats_pool(Tensor(h * (1.0 / 9.0)))
        assert np.array_equal(pooled.data, expected.data)

    def test_single_row_attention_passes_row_through(self):
        cfg = desk_cfg()
        p = build_params(cfg, seed=6)
        rng = np.random.default_rng(7)
        row = rng.standard_normal((1, cfg.frame_out_dim))
        pooled, alpha = frame_attention(row, p)
        e = cfg.frame_out_dim
        assert np.array_equal(alpha.data, np.ones(1))
        assert np.array_equal(pooled.data[:e], row[0])
        # identical "population" of one row: the variance floor sets the std
        assert np.allclose(pooled.data[e:], 1e-6, rtol=0, atol=0)

    def test_attentive_pooling_with_zero_scorer_matches_plain_xvector(self):
        cfg_a = desk_cfg(mode="xvector_attn")
        pa = build_params(cfg_a, seed=8)
        pa["att.w1"].data[...] = 0.0
        cfg_x = desk_cfg(mode="xvector")
        px = build_params(cfg_x, seed=9)
        for name, t in px.tensors.items():
            t.data[...] = pa[name].data
        rng = np.random.default_rng(10)
        frags = random_frags(rng, cfg_x, batch=3)
        n = np.full(3, 95)
        la, ea = forward_batch(frags, n, pa, cfg_a)
        lx, ex = forward_batch(frags, n, px, cfg_x)
        assert np.array_equal(la.data, lx.data)
        assert np.array_equal(ea.data, ex.data)


class TestGruDirections:
    def test_backward_pass_is_forward_on_reversed_input(self):
        cfg = ModelConfig.tiny()
        p = build_params(cfg, seed=11).gru("gru_f")
        rng = np.random.default_rng(12)
        seq = rng.standard_normal((2, 5, cfg.frame_cnn_out))
        rev = _gru_direction(Tensor(seq), p, reverse=True)
        flipped = _gru_direction(Tensor(seq[:, ::-1].copy()), p, reverse=False)
        assert np.array_equal(rev.data, flipped.data[:, ::-1])

    def test_zero_input_zero_state_stays_zero(self):
        cfg = ModelConfig.tiny()
        p = build_params(cfg, seed=13).gru("gru_b")
        for k in ("bz", "br", "bh"):
            p[k].data[...] = 0.0
        out = _gru_direction(Tensor(np.zeros((1, 4, cfg.frame_cnn_out))), p,
                             reverse=False)
        assert np.all(out.data == 0.0)


def _np_sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _np_conv_same(x, w, b):
    width = w.shape[0]
    pad = (width - 1) // 2
    batch, steps, _ = x.shape
    xp = np.zeros((batch, steps + 2 * pad, x.shape[2]))
    xp[:, pad:pad + steps] = x
    out = np.stack(
        [sum(xp[:, t + d] @ w[d] for d in range(width)) for t in range(steps)],
        axis=1,
    )
    return out + b


def _np_bn_inference(x, gamma, beta, mean, var):
    return gamma * (x - mean) / np.sqrt(var + 1e-5) + beta


def _np_gru(seq, p, reverse):
    batch, steps, _ = seq.shape
    hidden = p["uz"].shape[0]
    state = np.zeros((batch, hidden))
    outs = [None] * steps
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        xt = seq[:, t]
        z = _np_sigmoid(xt @ p["wz"].data + state @ p["uz"].data + p["bz"].data)
        r = _np_sigmoid(xt @ p["wr"].data + state @ p["ur"].data + p["br"].data)
        c = np.tanh(xt @ p["wh"].data + (r * state) @ p["uh"].data + p["bh"].data)
        state = (1.0 - z) * c + z * state
        outs[t] = state
    return np.stack(outs, axis=1)


def _np_attend_pool(h, p, prefix):
    z = np.maximum(h @ p[f"{prefix}.w0"].data + p[f"{prefix}.b0"].data, 0.0)
    scores = (z @ p[f"{prefix}.w1"].data)[..., 0]
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    alpha = e / e.sum(axis=-1, keepdims=True)
    rows = h * alpha[..., None]
    mu = rows.mean(axis=-2)
    var = np.maximum((rows ** 2).mean(axis=-2) - mu ** 2, 1e-12)
    return np.concatenate([mu, np.sqrt(var)], axis=-1)


class TestAgainstHandwrittenPipeline:
    def test_hvector_inference_matches_plain_numpy(self):
        cfg = ModelConfig.tiny(n_speakers=4)
        p = build_params(cfg, seed=14)
        rng = np.random.default_rng(15)
        # non-trivial normalisation statistics so the check has teeth
        for name, buf in p.buffers.items():
            if name.endswith(".var"):
                buf[...] = rng.uniform(0.5, 2.0, buf.shape)
            else:
                buf[...] = rng.uniform(-0.5, 0.5, buf.shape)
        for name, t in p.tensors.items():
            if ".gamma" in name or ".beta" in name:
                t.data[...] = rng.uniform(0.5, 1.5, t.shape)

        frags = random_frags(rng, cfg, batch=2)
        got_logits, got_emb = forward_batch(frags, full_frames(cfg, 2), p, cfg)

        def bn(x, name):
            return _np_bn_inference(
                x, p[f"{name}.gamma"].data, p[f"{name}.beta"].data,
                p.buffers[f"{name}.mean"], p.buffers[f"{name}.var"])

        batch, n_frag, m, feat = frags.shape
        x = frags.reshape(batch * n_frag, m, feat)
        h = bn(np.maximum(_np_conv_same(x, p["frame_conv.w"].data,
                                        p["frame_conv.b"].data), 0.0), "frame_bn")
        enc = np.concatenate(
            [_np_gru(h, p.gru("gru_f"), False), _np_gru(h, p.gru("gru_b"), True)],
            axis=-1,
        )
        segments = _np_attend_pool(enc, p, "frame_att").reshape(batch, n_frag, -1)
        seg = bn(np.maximum(segments @ p["seg_conv.w"].data[0]
                            + p["seg_conv.b"].data, 0.0), "seg_bn")
        utt = _np_attend_pool(seg, p, "seg_att")
        emb = bn(np.maximum(utt @ p["fc1.w"].data + p["fc1.b"].data, 0.0), "fc1_bn")
        z2 = np.maximum(emb @ p["fc2.w"].data + p["fc2.b"].data, 0.0)
        logits = z2 @ p["out.w"].data + p["out.b"].data

        np.testing.assert_allclose(got_emb.data, emb, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(got_logits.data, logits, rtol=1e-9, atol=1e-12)


class TestStageHelpers:
    def test_frame_encode_single_matches_batch_row(self):
        cfg = ModelConfig.tiny()
        p = build_params(cfg, seed=16)
        rng = np.random.default_rng(17)
        stack = rng.standard_normal((3, cfg.frames_per_fragment, cfg.feat_dim))
        batch = frame_encode(stack, p, cfg)
        single = frame_encode(stack[1], p, cfg)
        assert single.shape == (cfg.frames_per_fragment, cfg.frame_out_dim)
        np.testing.assert_allclose(single.data, batch.data[1], rtol=0, atol=1e-12)

    def test_segment_stages_single_matches_batch_row(self):
        cfg = ModelConfig.tiny()
        p = build_params(cfg, seed=18)
        rng = np.random.default_rng(19)
        segs = rng.standard_normal((2, cfg.n_fragments, 2 * cfg.frame_out_dim))
        enc = segment_encode(segs, p, cfg)
        assert enc.shape == (2, cfg.n_fragments, cfg.seg_cnn_out)
        enc_single = segment_encode(segs[0], p, cfg)
        np.testing.assert_allclose(enc_single.data, enc.data[0], rtol=0, atol=1e-12)
        pooled, alpha = segment_attention(enc.data[0], p)
        assert pooled.shape == (2 * cfg.seg_cnn_out,)
        assert alpha.shape == (cfg.n_fragments,)
        assert abs(float(alpha.data.sum()) - 1.0) < 1e-12

    def test_embed_batch_matches_per_utterance_forward(self):
        cfg = ModelConfig.tiny(n_speakers=3)
        p = build_params(cfg, seed=20)
        rng = np.random.default_rng(21)
        feats = [
            UtteranceFeatures(
                fragments=random_frags(rng, cfg, batch=1)[0],
                n_frames=cfg.n_fragments * cfg.frames_per_fragment,
            )
            for _ in range(5)
        ]
        table = embed_batch(feats, p, cfg, batch_size=2)
        assert table.shape == (5, cfg.fc1_dim)
        for i, u in enumerate(feats):
            _, emb = forward(u, p, cfg)
            np.testing.assert_allclose(table[i], emb.data, rtol=0, atol=1e-12)


class TestTrainingMode:
    def test_training_updates_normalisation_buffers(self):
        cfg = ModelConfig.tiny()
        p = build_params(cfg, seed=22)
        before = p.buffers["frame_bn.mean"].copy()
        rng = np.random.default_rng(23)
        frags = random_frags(rng, cfg, batch=2) + 1.5
        forward_batch(frags, full_frames(cfg, 2), p, cfg, training=True,
                      rng=np.random.default_rng(0))
        assert not np.array_equal(p.buffers["frame_bn.mean"], before)

    def test_inference_leaves_buffers_alone(self):
        cfg = ModelConfig.tiny()
        p = build_params(cfg, seed=24)
        snap = {k: v.copy() for k, v in p.buffers.items()}
        rng = np.random.default_rng(25)
        forward_batch(random_frags(rng, cfg, batch=2), full_frames(cfg, 2), p, cfg)
        for k, v in snap.items():
            assert np.array_equal(p.buffers[k], v)

    def test_training_dropout_requires_generator(self):
        cfg = ModelConfig.tiny()
        p = build_params(cfg, seed=26)
        rng = np.random.default_rng(27)
        with pytest.raises(ValueError, match="random generator"):
            forward_batch(random_frags(rng, cfg, batch=1), full_frames(cfg, 1),
                          p, cfg, training=True, rng=None)

    def test_training_forward_reproducible_with_same_generator_seed(self):
        cfg = ModelConfig.tiny()
        rng = np.random.default_rng(28)
        frags = random_frags(rng, cfg, batch=2)
        outs = []
        for _ in range(2):
            p = build_params(cfg, seed=29)
            logits, _ = forward_batch(frags, full_frames(cfg, 2), p, cfg,
                                      training=True, rng=np.random.default_rng(9))
            outs.append(logits.data)
        assert np.array_equal(outs[0], outs[1])


class TestCheckpoint:
    def test_roundtrip_is_exact(self, tmp_path):
        cfg = ModelConfig.tiny(n_speakers=6, mode="xvector_attn")
        p = build_params(cfg, seed=30)
        p.buffers["bn1.mean"][...] = 0.25
        path = tmp_path / "model.hvt"
        save_checkpoint(path, p, cfg)
        loaded, cfg2 = load_checkpoint(path)
        assert cfg2 == cfg
        assert set(loaded.tensors) == set(p.tensors)
        for name, t in p.tensors.items():
            assert np.array_equal(loaded[name].data, t.data)
        for name, b in p.buffers.items():
            assert np.array_equal(loaded.buffers[name], b)

    def test_missing_config_file(self, tmp_path):
        cfg = ModelConfig.tiny()
        p = build_params(cfg, seed=31)
        path = tmp_path / "model.hvt"
        save_checkpoint(path, p, cfg)
        (tmp_path / "model.cfg").unlink()
        with pytest.raises(FileNotFoundError, match="model.cfg"):
            load_checkpoint(path)

    def test_missing_tensor_detected(self, tmp_path):
        cfg = ModelConfig.tiny()
        p = build_params(cfg, seed=32)
        path = tmp_path / "model.hvt"
        save_checkpoint(path, p, cfg)
        arrays = hv.load_archive(path)
        del arrays["fc2.w"]
        hv.save_archive(path, arrays)
        with pytest.raises(ValueError, match="fc2.w"):
            load_checkpoint(path)

    def test_shape_mismatch_detected(self, tmp_path):
        cfg = ModelConfig.tiny()
        p = build_params(cfg, seed=33)
        path = tmp_path / "model.hvt"
        save_checkpoint(path, p, cfg)
        arrays = hv.load_archive(path)
        arrays["out.w"] = arrays["out.w"][:, :-1]
        hv.save_archive(path, arrays)
        with pytest.raises(ValueError, match="out.w"):
            load_checkpoint(path)
