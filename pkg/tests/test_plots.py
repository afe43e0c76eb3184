import numpy as np
import pandas as pd

from hybridwm.plots import ablation_bars, gate_montage, loss_curve, save_figure, save_heat_map


def test_heat_map(tmp_path):
    path = tmp_path / 'heat.png'
    save_heat_map(np.linspace(0, 1, 64).reshape(8, 8), path)
    assert path.exists()


def test_montage_grid(tmp_path):
    images = [np.random.default_rng(i).random((16, 16, 3)) for i in range(2)]
    gates = [np.full((16, 16), 0.5)] * 2
    fig = gate_montage(images, images, gates, ['a', 'b'])
    assert len(fig.axes) == 6
    assert save_figure(fig, tmp_path / 'sub' / 'montage.png').exists()


def test_ablation_bars_skips_failed(tmp_path):
    table = pd.DataFrame({'variant': ['full', 'dense_mdta', 'dual_no_ffu'],
                          'psnr': [30.0, float('nan'), 28.5], 'baseline_psnr': [20.0] * 3})
    fig = ablation_bars(table, 'psnr')
    assert len(fig.axes[0].patches) == 2
    save_figure(fig, tmp_path / 'bars.png')


def test_loss_curve(tmp_path):
    entries = [{'step': s, 'total': 1.0 / (s + 1), 'l_s1': 0.1, 'l_s2': 0.1, 'l_s3': 0.1}
               for s in range(5)]
    fig = loss_curve(entries)
    assert len(fig.axes[0].lines) == 2
    save_figure(fig, tmp_path / 'loss.png')
