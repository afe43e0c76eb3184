"""Conftest.py is loaded for each pytest. Contains fixtures shared by multiple tests, amongs other things """
import torch
from pytest import fixture

from hybridwm.config import TrainConfig, MetricsConfig
from hybridwm.synth import CLEAN_READS, build_corpus
from tests.factories import (RequestsMock, gradient_image, square_asset, small_ranges,
                             tiny_model_config, write_images)


@fixture
def mock_requests(monkeypatch):
    """Make sure the weights module does not do any actual http calls. Also makes it possible to set
    http responses

    Returns
    -------
    RequestsMock
    """
    requests_mock = RequestsMock()
    monkeypatch.setattr("hybridwm.weights.requests", requests_mock.requests)
    return requests_mock


@fixture(autouse=True)
def reset_clean_reads():
    CLEAN_READS.reset()
    yield
    CLEAN_READS.reset()


@fixture()
def an_image():
    return gradient_image(id='an_image')


@fixture()
def some_assets():
    return [square_asset(12, (1.0, 1.0, 1.0), 'white'),
            square_asset(10, (0.9, 0.1, 0.1), 'red')]


@fixture()
def some_ranges():
    return small_ranges()


@fixture()
def an_image_dir(tmp_path):
    image_dir = tmp_path / 'images'
    write_images(image_dir, n=2)
    return image_dir


@fixture()
def a_train_corpus(tmp_path, an_image_dir, some_assets, some_ranges):
    return build_corpus(an_image_dir, some_assets, some_ranges, tmp_path / 'train', seed=3,
                        split='train', variants=2)


@fixture()
def a_test_corpus(tmp_path, an_image_dir, some_assets, some_ranges):
    return build_corpus(an_image_dir, some_assets, some_ranges, tmp_path / 'test', seed=3,
                        split='test')


@fixture()
def a_small_model_config():
    return tiny_model_config()


@fixture()
def a_train_config():
    return TrainConfig(epochs=2, batch=2, crop=32, alpha=0.0, decay_every=1, seed=5,
                       device='cpu')


@fixture()
def a_metrics_config():
    return MetricsConfig(lpips=False)


@fixture()
def seeded():
    torch.manual_seed(0)
