import pytest
import torch

from owvis.data_model import ClassRegistry
from owvis.decoder_heads import (
    DecoderOutput,
    InstanceDecoder,
    PredictionHeads,
    RegistryMismatchError,
    SegmentationHead,
    token_centers,
)
from owvis.feature_net import FeatureEnricher, SmallBackbone

D = 64


@pytest.fixture(scope="module")
def enriched():
    torch.manual_seed(0)
    net = FeatureEnricher(d=D, n_heads=4, ffn_dim=64, enc_layers=2, backbone=SmallBackbone((8, 16, 16, 24, 32)))
    with torch.no_grad():
        return net(torch.rand(2, 3, 64, 64))[:2]


@pytest.mark.parametrize("m", [1, 2])
def test_decoder_shapes(m):
    net = FeatureEnricher(d=D, n_heads=4, ffn_dim=64, enc_layers=1, backbone=SmallBackbone((8, 16, 16, 24, 32)))
    feats, pos, _ = net(torch.rand(m, 3, 64, 64))
    out = InstanceDecoder(D, 4, 64, 2)(feats, pos, torch.randn(20, D), torch.randn(20, D))
    assert out.instance.shape == (20, D)
    assert out.box.shape == (20, m, D)


def test_query_permutation_equivariance(enriched):
    feats, pos = enriched
    dec = InstanceDecoder(D, 4, 64, 2).double().eval()
    feats = feats.with_features([l.features.double() for l in feats.levels])
    pos = [p.double() for p in pos]
    q = torch.randn(7, D, dtype=torch.float64)
    qp = torch.zeros(7, D, dtype=torch.float64)
    perm = torch.randperm(7)
    a = dec(feats, pos, q, qp)
    b = dec(feats, pos, q[perm], qp[perm])
    torch.testing.assert_close(b.instance, a.instance[perm], rtol=1e-10, atol=1e-10)


def test_token_centers(enriched):
    feats, _ = enriched
    c = token_centers(feats.levels, torch.float64)
    assert c.shape == (sum(l.features.shape[-2] * l.features.shape[-1] for l in feats.levels), 2)
    assert (c > 0).all() and (c < 1).all()
    h, w = feats.levels[0].features.shape[-2:]
    # row-major flattening: x varies fastest
    assert c[1, 0] > c[0, 0] and c[1, 1] == c[0, 1]
    assert c[w, 1] > c[0, 1]


def test_spatial_prior_bias():
    dec = InstanceDecoder(D, 4, 64, 1).double()
    ref = torch.tensor([[0.5, 0.5], [0.1, 0.9]], dtype=torch.float64)
    centers = torch.tensor([[0.5, 0.5], [0.6, 0.5], [0.9, 0.1]], dtype=torch.float64)
    with torch.no_grad():
        bias = dec.attention_bias(ref, torch.zeros(2, D, dtype=torch.float64), centers)
    sigma = 0.15
    assert bias[0, 0] == 0
    assert bias[0, 1] == pytest.approx(-0.01 / (2 * sigma**2))
    assert bias[1, 2] < bias[0, 2] < bias[0, 1]
    assert InstanceDecoder(D, 4, 64, 1, spatial_prior=False).attention_bias(ref, torch.zeros(2, D), centers) is None


def test_heads_widths_and_ranges():
    heads = PredictionHeads(D, 3)
    out = DecoderOutput(torch.randn(20, D), torch.randn(20, 2, D))
    b = heads(out, ClassRegistry((1, 2, 3)))
    assert b.class_logits.shape == (20, 4)
    assert b.objectness_logits.shape == (20,)
    assert b.boxes.shape == (20, 2, 4)
    assert ((b.boxes >= 0) & (b.boxes <= 1)).all()
    with pytest.raises(RegistryMismatchError):
        heads(out, ClassRegistry((1, 2)))


def test_incremental_extend_keeps_old_columns():
    heads = PredictionHeads(D, 3)
    out = DecoderOutput(torch.randn(20, D), torch.randn(20, 1, D))
    old_reg, new_reg = ClassRegistry((1, 2, 3)), ClassRegistry((1, 2, 3, 4, 5))
    before = heads(out, old_reg).class_logits.detach()
    heads.incremental_extend(old_reg, new_reg)
    after = heads(out, new_reg).class_logits.detach()
    assert after.shape == (20, 6)
    assert torch.equal(after[:, :4], before)


def test_incremental_extend_identity_and_shrink():
    heads = PredictionHeads(D, 3)
    reg = ClassRegistry((1, 2, 3))
    state = {k: v.clone() for k, v in heads.state_dict().items()}
    heads.incremental_extend(reg, reg)
    assert all(torch.equal(v, state[k]) for k, v in heads.state_dict().items())
    with pytest.raises(ValueError):
        heads.incremental_extend(ClassRegistry((1, 2, 3, 4, 5)), reg)


def test_segmentation_shapes_and_determinism(enriched):
    feats, _ = enriched
    seg = SegmentationHead(D)
    inst = torch.randn(20, D)
    inst[5] = inst[4]
    boxes = torch.rand(20, 2, 4)
    boxes[5] = boxes[4]
    masks = seg(inst, feats, boxes)
    assert masks.shape == (20, 2, 8, 8)
    assert torch.equal(masks[4], masks[5])


def test_segmentation_finite_at_float64(enriched):
    feats, _ = enriched
    seg = SegmentationHead(D).double()
    feats = feats.with_features([l.features.double() for l in feats.levels])
    masks = seg(torch.randn(20, D, dtype=torch.float64), feats, torch.rand(20, 2, 4, dtype=torch.float64))
    assert torch.isfinite(masks).all()


def test_branches_differentiable_wrt_inputs():
    torch.manual_seed(0)
    from owvis.model import ModelConfig, OWVISModel

    model = OWVISModel(ModelConfig.desk(d=16, n_heads=2, ffn_dim=16, num_queries=4), ClassRegistry((1,))).double()
    frames = torch.rand(1, 3, 32, 32, dtype=torch.float64, requires_grad=True)

    def readout(x):
        out = model(x)
        b = out["branch"]
        # masks use detached box centres, so they are left out of this check
        return b.class_logits.sum() + b.objectness_logits.sum() + b.boxes.sum()

    (g,) = torch.autograd.grad(readout(frames), frames)
    eps = 1e-6
    for idx in [(0, 0, 3, 4), (0, 1, 17, 9), (0, 2, 30, 30)]:
        with torch.no_grad():
            x = frames.detach().clone()
            x[idx] += eps
            up = float(readout(x))
            x[idx] -= 2 * eps
            down = float(readout(x))
        fd = (up - down) / (2 * eps)
        assert abs(fd - float(g[idx])) <= 1e-3 * max(abs(float(g[idx])), 1e-4)
