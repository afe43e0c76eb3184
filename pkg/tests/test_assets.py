import numpy as np
import pytest

from hybridwm.assets import (render_builtin_assets, write_assets, load_assets, render_logo,
                             WatermarkAsset, AssetException)


@pytest.fixture(scope='module')
def builtin_assets():
    return render_builtin_assets()


def test_twelve_builtin_assets(builtin_assets):
    names = [a.name for a in builtin_assets]
    assert len(builtin_assets) == 12
    assert len(set(names)) == 12
    assert sum(n.startswith('text_') for n in names) == 6
    assert sum(n.startswith('logo_') for n in names) == 3
    assert sum(n.startswith('combo_') for n in names) == 3


def test_assets_have_soft_alpha(builtin_assets):
    for asset in builtin_assets:
        assert asset.rgba.dtype == np.float32
        assert 0.0 <= asset.alpha.min() and asset.alpha.max() <= 1.0
        assert asset.alpha.max() > 0.9, asset.name
        # blurred edges give intermediate opacities
        assert np.any((asset.alpha > 0.05) & (asset.alpha < 0.95)), asset.name


def test_rendering_is_deterministic(builtin_assets):
    again = render_builtin_assets()
    for a, b in zip(builtin_assets, again):
        assert np.array_equal(a.rgba, b.rgba)


def test_write_load(tmp_path, builtin_assets):
    paths = write_assets(builtin_assets, tmp_path)
    assert paths[0].name == f"00_{builtin_assets[0].name}.png"
    loaded = load_assets(tmp_path)
    assert [a.name for a in loaded] == [a.name for a in builtin_assets]
    assert np.abs(loaded[6].rgba - builtin_assets[6].rgba).max() <= 0.5 / 255 + 1e-6


def test_load_empty_dir(tmp_path):
    with pytest.raises(AssetException):
        load_assets(tmp_path)


def test_unknown_logo():
    with pytest.raises(AssetException):
        render_logo('hexagon', (1, 1, 1), 'x')


def test_asset_needs_alpha():
    with pytest.raises(AssetException):
        WatermarkAsset(rgba=np.zeros((4, 4, 3), dtype=np.float32), name='flat')
