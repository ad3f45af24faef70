import numpy as np
import pytest
import torch

from residual_reid.embedder import BackboneConfig, Embedder, extract, retrieval_feature
from residual_reid.errors import ConfigurationError, ShapeError
from residual_reid.retrieval import rank_gallery, pairwise_distances


@pytest.fixture(scope="module")
def trained_embedder():
    """A small embedder whose BN running statistics have seen a few batches."""
    torch.manual_seed(0)
    model = Embedder(BackboneConfig(num_classes=10, feature_dim=16, widths=(8, 8, 16)))
    model.train()
    with torch.no_grad():
        for _ in range(5):
            model(torch.randn(16, 3, 32, 32))
    return model.eval()


def test_record_shapes(trained_embedder):
    out = extract(torch.randn(8, 3, 32, 32), trained_embedder)
    assert len(out) == 8
    recs = out.records()
    assert recs[0].pre_neck.shape == (16,)
    assert recs[0].post_neck.shape == (16,)
    assert recs[0].logits.shape == (10,)
    assert retrieval_feature(recs[0]).shape == (16,)
    assert torch.equal(retrieval_feature(recs[3]), out.post_neck[3])


def test_duplicates_identical_in_eval(trained_embedder):
    x = torch.randn(1, 3, 32, 32)
    out = extract(torch.cat([x, x, x]), trained_embedder)
    assert torch.equal(out.post_neck[0], out.post_neck[1])
    assert torch.equal(out.post_neck[0], out.post_neck[2])


def test_eval_outputs_batch_size_independent(trained_embedder):
    x = torch.randn(32, 3, 32, 32)
    full = extract(x, trained_embedder).post_neck
    single = torch.cat([extract(x[i:i + 1], trained_embedder).post_neck for i in range(32)])
    assert (full - single).abs().max().item() < 1e-5


def test_training_mode_uses_batch_statistics(trained_embedder):
    x = torch.randn(8, 3, 32, 32)
    a = extract(x, trained_embedder, training=False).post_neck
    with torch.no_grad():
        b = extract(x, trained_embedder, training=True).post_neck
    assert not torch.allclose(a, b)
    assert not trained_embedder.training


def test_bn_neck_is_affine_per_dimension(trained_embedder):
    torch.manual_seed(1)
    fit = extract(torch.randn(24, 3, 32, 32), trained_embedder)
    check = extract(torch.randn(24, 3, 32, 32), trained_embedder)
    pre, post = fit.pre_neck.double().numpy(), fit.post_neck.double().numpy()
    slopes, offsets = [], []
    for d in range(pre.shape[1]):
        a, b = np.polyfit(pre[:, d], post[:, d], 1)
        slopes.append(a)
        offsets.append(b)
    pred = check.pre_neck.double().numpy() * np.array(slopes) + np.array(offsets)
    assert np.abs(pred - check.post_neck.double().numpy()).max() < 1e-5


def test_permutation_equivariance(trained_embedder):
    x = torch.randn(10, 3, 32, 32)
    perm = torch.randperm(10)
    a = extract(x, trained_embedder).post_neck[perm]
    b = extract(x[perm], trained_embedder).post_neck
    assert (a - b).abs().max().item() < 1e-6


def test_cosine_and_euclidean_rankings_agree_after_normalization(trained_embedder):
    torch.manual_seed(2)
    feats = extract(torch.randn(60, 3, 32, 32), trained_embedder).post_neck.double().numpy()
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    queries, gallery = feats[:50], feats[50:]
    ids = np.arange(len(gallery))
    dist = pairwise_distances(queries, gallery)
    for qi in range(50):
        by_l2, _ = rank_gallery(dist[qi], ids, None, -1, None)
        by_cos = np.argsort(-(gallery @ queries[qi]), kind="stable")
        assert by_l2.tolist() == by_cos.tolist()


def test_classifier_has_bias():
    model = Embedder(BackboneConfig(num_classes=7))
    assert model.classifier.bias is not None and model.classifier.bias.shape == (7,)


def test_channel_mismatch():
    model = Embedder(BackboneConfig(in_channels=6, num_classes=3, feature_dim=8, widths=(4, 4, 8)))
    with pytest.raises(ShapeError):
        model(torch.zeros(2, 3, 32, 32))
    assert model.eval()(torch.zeros(2, 6, 32, 32)).pre_neck.shape == (2, 8)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        BackboneConfig(variant="vit")
    with pytest.raises(ConfigurationError):
        BackboneConfig(in_channels=4)


def test_resnet50_variant_builds():
    model = Embedder(BackboneConfig(variant="resnet50_like", feature_dim=2048, num_classes=5,
                                    in_channels=6)).eval()
    with torch.no_grad():
        out = model(torch.zeros(1, 6, 64, 64))
    assert out.pre_neck.shape == (1, 2048)
    assert out.logits.shape == (1, 5)
