import numpy as np
import pytest

from canonseg import groups as G
from canonseg import losses as L
from canonseg import prompts as P
from canonseg import segnet as S
from canonseg import tensor as T
from canonseg import textenc as TE
from canonseg.canonicalizer import Canonicalizer


CLASS_NAMES = ["liver", "right kidney", "left kidney", "spleen"]


@pytest.fixture(scope="module")
def bank():
    return P.default_bank(CLASS_NAMES)


@pytest.fixture(scope="module")
def vocab(bank):
    return TE.Vocabulary.from_bank(bank)


def make_model(vocab, mode="invariant", seed=0, size_hint=64):
    canon = Canonicalizer(group_order=4, layers=3, hidden=4, kernel=5, pool_to=16, seed=seed)
    enc = TE.TextEncoderNet(vocab, dim=32, token_dim=16, hidden=24,
                            rng=np.random.default_rng(seed + 1))
    head = TE.IntentionHead(len(CLASS_NAMES), dim=32, rng=np.random.default_rng(seed + 2))
    backbone = S.SegBackbone(chans=(8, 12, 16), embed_dim=32, seed=seed + 3)
    return S.Segmenter(canon, enc, head, backbone, mode=mode)


class TestSegmentBasics:
    def test_output_shape_and_range(self, vocab, bank, rng):
        model = make_model(vocab)
        x = rng.random((64, 64)).astype(np.float32)
        res = model.segment(x, P.generate_informed(0, bank, 1))
        assert res.probs.shape == (64, 64)
        assert res.probs.min() >= 0.0 and res.probs.max() <= 1.0
        assert res.intent_logits.shape == (len(CLASS_NAMES),)

    def test_non_square_rejected(self, vocab, bank):
        model = make_model(vocab)
        with pytest.raises(G.NonSquareImage):
            model.segment(np.zeros((32, 16), dtype=np.float32), "segment the liver")

    def test_unnormalized_rejected(self, vocab, bank):
        model = make_model(vocab)
        x = np.full((32, 32), 2.0, dtype=np.float32)
        with pytest.raises(S.UnnormalizedInput):
            model.segment(x, "segment the liver")

    def test_accepts_raw_text_prompt(self, vocab, rng):
        model = make_model(vocab)
        res = model.segment(rng.random((32, 32)).astype(np.float32), "outline the spleen")
        assert res.probs.shape == (32, 32)


class TestArchitecturalInvariance:
    def test_invariant_mode_identity(self, vocab, bank, rng):
        """Masks agree across the whole D4 orbit with random parameters."""
        action = G.GroupAction(4)
        for seed in range(3):
            model = make_model(vocab, mode="invariant", seed=seed)
            x = rng.random((32, 32)).astype(np.float32)
            prompt = P.generate_informed(seed % 4, bank, seed)
            base = model.segment(x, prompt).probs
            for g in G.elements(4):
                moved = model.segment(action.act(g, x), prompt).probs
                assert np.abs(moved - base).max() <= 1e-5

    def test_equivariant_mode_identity(self, vocab, bank, rng):
        action = G.GroupAction(4)
        for seed in range(3):
            model = make_model(vocab, mode="equivariant", seed=seed)
            x = rng.random((32, 32)).astype(np.float32)
            prompt = P.generate_informed(seed % 4, bank, seed)
            base = model.segment(x, prompt).probs
            for g in G.elements(4):
                moved = model.segment(action.act(g, x), prompt).probs
                assert np.abs(moved - action.act(g, base)).max() <= 1e-5

    def test_zero_conditioning_prompt_independence(self, vocab, bank, rng):
        model = make_model(vocab)
        model.backbone.film_enabled = False
        x = rng.random((32, 32)).astype(np.float32)
        a = model.segment(x, P.generate_informed(0, bank, 1)).probs
        b = model.segment(x, P.generate_informed(2, bank, 9)).probs
        c = model.segment(x, P.generate_agnostic(P.SpatialCategory.largest, bank, 3)).probs
        assert np.array_equal(a, b) and np.array_equal(a, c)

    def test_film_conditions_output(self, vocab, bank, rng):
        model = make_model(vocab)
        # non-zero FiLM maps must make masks prompt-dependent
        arrays = {name: t.data.copy() for name, t in model.backbone.parameters()}
        rng2 = np.random.default_rng(5)
        for name in arrays:
            if ".film" in name:
                arrays[name] = rng2.normal(0, 0.3, arrays[name].shape).astype(np.float32)
        model.backbone.load_parameters(arrays)
        x = rng.random((32, 32)).astype(np.float32)
        a = model.segment(x, P.generate_informed(0, bank, 1)).probs
        b = model.segment(x, P.generate_informed(2, bank, 9)).probs
        assert not np.array_equal(a, b)


class TestExistenceFilter:
    def test_all_zero_absent(self):
        assert S.existence_filter(np.zeros((8, 8)), 0.5) is False

    def test_single_high_pixel_present(self):
        probs = np.zeros((8, 8))
        probs[3, 4] = 0.9
        assert S.existence_filter(probs, 0.5) is True

    def test_threshold_boundary(self):
        probs = np.full((4, 4), 0.5)
        assert S.existence_filter(probs, 0.5) is True
        assert S.existence_filter(probs * 0.999, 0.5) is False

    def test_alpha_configurable(self):
        probs = np.full((4, 4), 0.3)
        assert S.existence_filter(probs, 0.25) is True
        assert S.existence_filter(probs, 0.5) is False


class TestEndToEndGradient:
    def test_full_model_grad_check_16px(self, rng):
        """Differentiable path: soft canonicalization -> backbone -> combined loss."""
        bank = P.default_bank(CLASS_NAMES)
        with T.float64_mode():
            vocab = TE.Vocabulary.from_bank(bank, max_len=8)
            canon = Canonicalizer(group_order=4, layers=3, hidden=2, kernel=3, pool_to=8, seed=2)
            enc = TE.TextEncoderNet(vocab, dim=8, token_dim=6, hidden=8,
                                    rng=np.random.default_rng(3))
            head = TE.IntentionHead(4, dim=8, rng=np.random.default_rng(4))
            backbone = S.SegBackbone(chans=(3, 4, 5), embed_dim=8, seed=5)
            # make FiLM non-trivial so its gradients are exercised
            arrays = {name: t.data.copy() for name, t in backbone.parameters()}
            rng2 = np.random.default_rng(6)
            for name in arrays:
                if ".film" in name:
                    arrays[name] = rng2.normal(0, 0.2, arrays[name].shape)
            backbone.load_parameters(arrays)

            x = rng.random((16, 16))
            g = G.GroupElement(4, 3, True)
            action = G.GroupAction(4)
            xg = action.act(g, x)
            target = np.zeros((16, 16))
            target[4:9, 5:11] = 1.0
            ids = np.array([TE.tokenize("segment the liver", vocab)])
            cfg = L.LossConfig()

            def loss_fn():
                soft = canon.canonicalize_soft_batch(xg[None], temperature=0.5)
                emb = enc.encode_ids(ids)
                logits = backbone.forward(T.reshape(soft, (1, 1, 16, 16)), emb)
                probs = T.sigmoid(T.reshape(logits, (16, 16)))
                intent = TE.classify_intent(head, T.reshape(emb, (8,)))
                return L.combined_loss(cfg, probs, target, intent, 0)

            checked = 0
            for name, param in (
                canon.parameters() + enc.parameters() + head.parameters() + backbone.parameters()
            ):
                holders = {n: t for n, t in (
                    canon.parameters() + enc.parameters() + head.parameters() + backbone.parameters()
                )}

                def f(probe, name=name):
                    arrays_all = {n: t.data for n, t in holders.items()}
                    arrays_all[name] = probe.data
                    prefix = name.split(".")[0]
                    if prefix == "canon":
                        canon.load_parameters({k: v for k, v in arrays_all.items() if k.startswith("canon.")})
                    elif prefix == "text":
                        enc.load_parameters({k: v for k, v in arrays_all.items() if k.startswith("text.")})
                    elif prefix == "intent":
                        head.load_parameters({k: v for k, v in arrays_all.items() if k.startswith("intent.")})
                    else:
                        backbone.load_parameters({k: v for k, v in arrays_all.items() if k.startswith("seg.")})
                    # rebind the probe tensor itself so gradients land on it
                    for nets in (canon, enc, head, backbone):
                        for n2, t2 in nets.parameters():
                            if n2 == name:
                                _swap_in(nets, n2, probe)
                    return loss_fn()

                if param.size > 60:
                    continue  # spot-check the small tensors; big kernels are covered elsewhere
                probe = T.Tensor(param.data, requires_grad=True, dtype=np.float64)
                err = T.grad_check(f, probe, step=1e-5)
                assert err <= 1e-4, f"{name}: {err}"
                checked += 1
            assert checked >= 10


def _swap_in(net, name, tensor):
    attr = name.split(".", 1)[1]
    if name.startswith("canon."):
        part, leaf = attr.split(".")
        layer = net.lift if part == "lift" else net.gconvs[int(part[1:])]
        setattr(layer, leaf, tensor)
    elif name.startswith("text.") or name.startswith("intent."):
        mapping = {"weight": "weight", "bias": "bias"}
        setattr(net, mapping.get(attr, attr), tensor)
    else:
        parts = attr.split(".")
        if parts[0] == "ctx":
            setattr(net, "ctx_w" if parts[1] == "w" else "ctx_b", tensor)
        elif parts[0].startswith("film"):
            idx = int(parts[0][4:])
            wg, wb = net.film[idx]
            net.film[idx] = (tensor, wb) if parts[1] == "scale" else (wg, tensor)
        else:
            kern, bias = getattr(net, parts[0])
            setattr(net, parts[0], (tensor, bias) if parts[1] == "kernel" else (kern, tensor))
