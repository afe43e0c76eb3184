import json
import math

import numpy as np
import pytest
import torch
from torch import nn

from hybridwm.config import MetricsConfig, TrainConfig
from hybridwm.imgcore import image_to_tensor, save_image
from hybridwm.losses import FeatureExtractor
from hybridwm.network import build_model, extract_gate_maps
from hybridwm.synth import CLEAN_READS, build_corpus
from hybridwm.trainer import (CheckpointException, EvaluationResult, StepBatchSampler, Trainer,
                              TrainerException, TrainingDataset, degradation_baseline, epoch_order,
                              evaluate, load_checkpoint, lr_schedule, save_checkpoint, train)
from tests.factories import gradient_image, small_ranges, square_asset, tiny_model_config


def a_trainer(corpus, cfg, run_dir=None, **kwargs):
    torch.manual_seed(0)
    model = build_model(tiny_model_config())
    return Trainer(model, corpus, cfg, run_dir=run_dir, device=torch.device('cpu'), **kwargs)


@pytest.mark.parametrize("epoch, expected", [(0, 1e-3), (29, 1e-3), (30, 1e-4), (99, 1e-6)])
def test_lr_schedule(epoch, expected):
    assert lr_schedule(TrainConfig(), epoch) == pytest.approx(expected)


@pytest.mark.parametrize("epoch", [-1, 100])
def test_lr_schedule_out_of_range(epoch):
    with pytest.raises(TrainerException):
        lr_schedule(TrainConfig(), epoch)


def test_epoch_order():
    assert np.array_equal(epoch_order(1, 0, 10), epoch_order(1, 0, 10))
    assert not np.array_equal(epoch_order(1, 0, 10), epoch_order(1, 1, 10))
    assert sorted(epoch_order(1, 3, 10)) == list(range(10))


def test_sampler_resumes_mid_run():
    full = list(StepBatchSampler(n=7, batch=3, seed=2, start_step=0, stop_step=8))
    tail = list(StepBatchSampler(n=7, batch=3, seed=2, start_step=5, stop_step=8))
    assert full[5:] == tail
    # 7 // 3 = 2 steps per epoch, the last sample of each epoch is dropped
    assert [batch[0][0] for batch in full] == [0, 0, 1, 1, 2, 2, 3, 3]
    assert all(len(batch) == 3 for batch in full)


def test_sampler_batch_larger_than_corpus():
    batches = list(StepBatchSampler(n=2, batch=8, seed=0, start_step=0, stop_step=2))
    assert [len(b) for b in batches] == [2, 2]


def test_dataset_crops_are_keyed(a_train_corpus, a_train_config):
    dataset = TrainingDataset(a_train_corpus, a_train_config)
    first = dataset[(0, 1)]
    again = dataset[(0, 1)]
    other = dataset[(1, 1)]
    assert first['x_wn'].shape == (3, 32, 32)
    assert torch.equal(first['x_wn'], again['x_wn'])
    assert first['id'] == a_train_corpus[1].id
    assert not torch.equal(first['x_wn'], other['x_wn'])
    assert CLEAN_READS.count == 0


def test_dataset_shrinks_crop(a_train_corpus):
    dataset = TrainingDataset(a_train_corpus, TrainConfig(crop=256))
    assert dataset.crop == 64


def test_dataset_resample_needs_assets(a_train_corpus):
    with pytest.raises(TrainerException):
        TrainingDataset(a_train_corpus, TrainConfig(crop=32, resample_per_epoch=True))


def test_dataset_resamples(a_train_corpus, some_assets, some_ranges):
    cfg = TrainConfig(crop=32, resample_per_epoch=True)
    dataset = TrainingDataset(a_train_corpus, cfg, some_assets, some_ranges)
    stored = TrainingDataset(a_train_corpus, TrainConfig(crop=32))
    assert not torch.equal(dataset[(0, 0)]['x_wn'], stored[(0, 0)]['x_wn'])
    assert torch.equal(dataset[(0, 0)]['x_w'], stored[(0, 0)]['x_w'])


def test_no_train_split(a_test_corpus, a_train_config):
    with pytest.raises(TrainerException):
        a_trainer(a_test_corpus, a_train_config)


def test_texture_loss_needs_extractor(a_train_corpus):
    with pytest.raises(TrainerException):
        a_trainer(a_train_corpus, TrainConfig(crop=32, alpha=0.024))


def test_run_writes_log_and_checkpoints(tmp_path, a_train_corpus, a_train_config):
    trainer = a_trainer(a_train_corpus, a_train_config, run_dir=tmp_path / 'run')
    assert trainer.steps_per_epoch == 2
    entries = trainer.run()
    assert len(entries) == trainer.total_steps == 4
    assert [e['lr'] for e in entries] == pytest.approx([1e-3, 1e-3, 1e-4, 1e-4])
    assert all(math.isfinite(e['total']) for e in entries)
    assert CLEAN_READS.count == 0

    lines = (tmp_path / 'run' / 'logs' / 'train.jsonl').read_text().splitlines()
    assert [json.loads(line)['step'] for line in lines] == [0, 1, 2, 3]
    checkpoints = tmp_path / 'run' / 'checkpoints'
    assert (checkpoints / 'epoch_000.pt').exists()
    assert (checkpoints / 'epoch_001.pt').exists()
    assert (checkpoints / 'last.pt').exists()
    assert trainer.run() == []


def test_evaluating_during_training_keeps_clean_images_out(tmp_path, a_train_corpus, a_test_corpus,
                                                           a_metrics_config):
    cfg = TrainConfig(epochs=2, batch=2, crop=32, alpha=0.0, eval_every=1, device='cpu')
    trainer = a_trainer(a_train_corpus, cfg, run_dir=tmp_path / 'run', eval_manifest=a_test_corpus,
                        metrics_cfg=a_metrics_config)
    trainer.run()
    assert CLEAN_READS.count == 0
    assert trainer.clean_reads == 0
    # 2 evaluations of 4 test images
    assert CLEAN_READS.suspended_count == 8
    assert (tmp_path / 'run' / 'checkpoints' / 'best.pt').exists()


def test_clean_read_in_training_step_fails_the_run(a_train_corpus, a_test_corpus, a_train_config):
    trainer = a_trainer(a_train_corpus, a_train_config)
    sample = a_test_corpus[0].load_sample(a_test_corpus.root)
    step = trainer.train_step

    def leaking_step(batch):
        sample.y_clean
        return step(batch)

    trainer.train_step = leaking_step
    with pytest.raises(TrainerException) as e:
        trainer.run(max_steps=1)
    assert 'read y_clean 1 times' in str(e.value)


def test_max_steps(a_train_corpus, a_train_config):
    trainer = a_trainer(a_train_corpus, a_train_config)
    assert len(trainer.run(max_steps=1)) == 1
    assert trainer.step == 1


def test_resume_matches_uninterrupted(tmp_path, a_train_corpus, a_train_config):
    uninterrupted = a_trainer(a_train_corpus, a_train_config).run()

    first = a_trainer(a_train_corpus, a_train_config, run_dir=tmp_path / 'first')
    first.run(max_steps=3)
    path = first.save(tmp_path / 'mid.pt')
    resumed = a_trainer(a_train_corpus, a_train_config)
    resumed.restore(load_checkpoint(path))
    rest = resumed.run()

    assert len(rest) == 1
    assert rest[0]['step'] == 3
    assert rest[0]['total'] == pytest.approx(uninterrupted[3]['total'], rel=1e-6)


def test_resume_is_bit_identical_for_50_steps(tmp_path, a_train_corpus):
    cfg = TrainConfig(epochs=27, batch=2, crop=32, alpha=0.0, seed=5, device='cpu')
    uninterrupted = a_trainer(a_train_corpus, cfg)
    reference = uninterrupted.run()
    assert len(reference) == 54

    first = a_trainer(a_train_corpus, cfg)
    first.run(max_steps=4)
    path = first.save(tmp_path / 'mid.pt')
    resumed = a_trainer(a_train_corpus, cfg)
    resumed.restore(load_checkpoint(path))
    rest = resumed.run()

    assert len(rest) == 50
    assert [e['total'] for e in rest] == [e['total'] for e in reference[4:]]
    for name, value in uninterrupted.model.state_dict().items():
        assert torch.equal(resumed.model.state_dict()[name], value)



def test_same_seed_same_losses(a_train_corpus, a_train_config):
    a = a_trainer(a_train_corpus, a_train_config).run(max_steps=2)
    b = a_trainer(a_train_corpus, a_train_config).run(max_steps=2)
    assert [e['total'] for e in a] == [e['total'] for e in b]


def test_texture_training_step(a_train_corpus):
    features = nn.Sequential(nn.Conv2d(3, 4, 3, padding=1), nn.ReLU())
    fx = FeatureExtractor(features, taps=(1,))
    cfg = TrainConfig(epochs=1, batch=2, crop=32, alpha=0.024, device='cpu')
    entries = a_trainer(a_train_corpus, cfg, fx=fx).run(max_steps=1)
    assert entries[0]['l_t2'] > 0


def test_train_function(a_train_corpus, a_train_config):
    torch.manual_seed(0)
    state = train(build_model(tiny_model_config()), a_train_corpus, a_train_config,
                  device=torch.device('cpu'))
    assert state.step == 4
    assert state.epoch == 2


def test_checkpoint_header(tmp_path, a_train_corpus, a_train_config):
    trainer = a_trainer(a_train_corpus, a_train_config)
    trainer.run(max_steps=1)
    path = trainer.save(tmp_path / 'ckpt.pt')
    state = load_checkpoint(path)
    assert state.step == 1
    assert state.model_config == tiny_model_config()
    assert state.train_config == a_train_config
    assert state.saved_at.tzinfo is not None


def test_checkpoint_shape_mismatch(tmp_path, a_train_corpus, a_train_config):
    path = a_trainer(a_train_corpus, a_train_config).save(tmp_path / 'ckpt.pt')
    wider = build_model(tiny_model_config(base_width=16))
    with pytest.raises(CheckpointException) as e:
        load_checkpoint(path, wider)
    assert "Shape mismatch for 'stem.weight'" in str(e.value)


def test_checkpoint_wrong_schema(tmp_path, a_train_corpus, a_train_config):
    trainer = a_trainer(a_train_corpus, a_train_config)
    path = save_checkpoint(trainer.state(), tmp_path / 'ckpt.pt')
    archive = torch.load(path, weights_only=False)
    archive['header']['schema_version'] = 99
    torch.save(archive, path)
    with pytest.raises(CheckpointException):
        load_checkpoint(path)


def test_checkpoint_not_a_checkpoint(tmp_path):
    path = tmp_path / 'x.pt'
    torch.save({'weights': 1}, path)
    with pytest.raises(CheckpointException):
        load_checkpoint(path)
    with pytest.raises(CheckpointException):
        load_checkpoint(tmp_path / 'missing.pt')


def test_evaluate_writes_tables(tmp_path, a_test_corpus, a_metrics_config):
    torch.manual_seed(0)
    model = build_model(tiny_model_config())
    result = evaluate(model, a_test_corpus, a_metrics_config, out_dir=tmp_path / 'eval',
                      dump_images=True)
    assert len(result.rows) == 4
    assert not result.errors
    assert CLEAN_READS.count == 4
    for name in ('metrics.csv', 'summary.csv', 'metrics.json'):
        assert (tmp_path / 'eval' / name).exists()
    assert len(list((tmp_path / 'eval' / 'images').glob('*_y_hat.png'))) == 4
    summary = result.aggregate()
    assert summary['count'].tolist() == [4]


def test_degradation_baseline(a_test_corpus):
    baseline = degradation_baseline(a_test_corpus)
    # sigma 15 noise and a half-transparent mark, so far from perfect
    assert 10 < baseline.mean('psnr') < 40
    assert 0 < baseline.mean('ssim') < 1


def test_evaluate_records_failures(a_test_corpus, a_metrics_config):
    def broken(img):
        return {'y_hat': img.with_pixels(img.pixels[:8])}

    result = evaluate(None, a_test_corpus, a_metrics_config, restore=broken)
    assert result.rows == []
    assert len(result.errors) == 4


def test_inf_psnr_in_results():
    rows = [{'id': 'a', 'sigma': 0.0, 'alpha_w': 0.5, 'psnr': math.inf, 'ssim': 1.0, 'lpips': None},
            {'id': 'b', 'sigma': 0.0, 'alpha_w': 0.5, 'psnr': 30.0, 'ssim': 0.9, 'lpips': None}]
    result = EvaluationResult(rows=rows)
    assert result.mean('psnr') == 30.0
    assert result.aggregate()['psnr_mean'].tolist() == [30.0]
    as_dict = result.to_dict()
    assert as_dict['images'][0]['psnr'] == 'inf'
    json.dumps(as_dict)


@pytest.mark.slow
def test_desk_scale_training(tmp_path):
    """300 steps on 16 images, then compare with doing nothing on 8 unseen ones"""
    ranges = small_ranges(transparencies=(0.3,), sigmas=(25,))
    mark = [square_asset(16, (1.0, 1.0, 1.0), 'white')]
    (tmp_path / 'train_images').mkdir()
    (tmp_path / 'test_images').mkdir()
    for index in range(24):
        folder = 'train_images' if index < 16 else 'test_images'
        save_image(gradient_image(seed=index), tmp_path / folder / f"clean{index:02d}.png")
    train_corpus = build_corpus(tmp_path / 'train_images', mark, ranges, tmp_path / 'train', seed=0)
    test_corpus = build_corpus(tmp_path / 'test_images', mark, ranges, tmp_path / 'test', seed=1,
                               split='test')
    assert len(train_corpus) == 16
    assert len(test_corpus) == 8

    torch.manual_seed(0)
    model = build_model(tiny_model_config(base_width=16))
    cfg = TrainConfig(epochs=75, batch=4, crop=64, alpha=0.0, decay_every=1000, device='cpu')
    trainer = Trainer(model, train_corpus, cfg, device=torch.device('cpu'))
    entries = trainer.run()
    assert len(entries) == 300
    assert trainer.clean_reads == 0

    totals = [e['total'] for e in entries]
    assert np.mean(totals[-50:]) < 0.6 * np.mean(totals[:50])

    metrics = MetricsConfig(lpips=False)
    restored = evaluate(trainer.model, test_corpus, metrics)
    baseline = degradation_baseline(test_corpus, metrics)
    assert restored.mean('psnr') >= baseline.mean('psnr') + 2.0

    x_wn = test_corpus[0].load_sample(test_corpus.root).x_wn
    with torch.no_grad():
        heat = extract_gate_maps(trainer.model.eval(), image_to_tensor(x_wn))
    assert heat.std() > 0
