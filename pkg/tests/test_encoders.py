import numpy as np
import pytest
import torch

from encoders import (
    Backbone,
    FeatureMap,
    ImageEncoder,
    LiftToBEV,
    PillarEncoder,
    RangeViewEncoder,
    VectorPool,
    clouds_to_tensor,
    encode_image,
    encode_pillars,
    encode_range_view,
    lift_image_to_bev,
    pool_to_vector,
)
from geometry import PointCloud, project_range_view
from schemas import BackboneConfig, BevGridSpec, CameraSpec, EgoState
from synthworld import cast_lidar, init_world, render_rgbd


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def test_image_encoder_desk_shape():
    enc = ImageEncoder(BackboneConfig(in_channels=3, stage_channels=[16, 32, 64], fused_channels=64, out_stride=8))
    feat = enc(torch.rand(1, 3, 96, 160))
    assert feat.values.shape == (1, 64, 12, 20)
    assert feat.stride == 8
    assert feat.sensor_tag == "camera"


def test_encode_image_rejects_out_of_range():
    backbone = Backbone(BackboneConfig(in_channels=3, stage_channels=[4, 8], fused_channels=8, out_stride=4))
    with pytest.raises(ValueError):
        encode_image(torch.full((1, 3, 8, 8), 1.5), backbone)


def test_backbone_rejects_indivisible_input():
    backbone = Backbone(BackboneConfig(in_channels=3, stage_channels=[4, 8], fused_channels=8, out_stride=8))
    with pytest.raises(ValueError):
        backbone(torch.zeros(1, 3, 12, 16))


def test_range_view_encoder_desk_shape():
    enc = RangeViewEncoder(BackboneConfig(in_channels=4, stage_channels=[16, 32, 64], fused_channels=64, out_stride=4), 50.0)
    feat = enc(torch.rand(2, 4, 16, 128))
    assert feat.values.shape == (2, 64, 4, 32)
    assert feat.sensor_tag == "lidar"


def test_encode_range_view_empty_and_wrong_channels():
    backbone = Backbone(BackboneConfig(in_channels=4, stage_channels=[8, 16], fused_channels=16, out_stride=4))
    feat = encode_range_view(torch.zeros(1, 4, 8, 32), backbone)
    assert feat.values.shape == (1, 16, 2, 8)
    assert torch.isfinite(feat.values).all()
    with pytest.raises(ValueError, match="4 channels"):
        encode_range_view(torch.zeros(1, 3, 8, 32), backbone)


def test_encode_range_view_swapped_columns_stay_local():
    backbone = Backbone(BackboneConfig(in_channels=4, stage_channels=[8, 16], fused_channels=16, out_stride=4))
    # group norm statistics span the whole map; take them out to see the conv footprint
    for name, module in list(backbone.named_modules()):
        if isinstance(module, torch.nn.GroupNorm):
            parent, _, attr = name.rpartition(".")
            setattr(backbone.get_submodule(parent), attr, torch.nn.Identity())

    rv = torch.rand(1, 4, 8, 512)
    swapped = rv.clone()
    swapped[..., [16, 496]] = rv[..., [496, 16]]
    a = encode_range_view(rv, backbone).values
    b = encode_range_view(swapped, backbone).values

    assert a.shape[-1] == 128
    torch.testing.assert_close(b[..., 40:88], a[..., 40:88], rtol=0, atol=1e-6)
    assert not torch.allclose(b[..., 4], a[..., 4])
    assert not torch.allclose(b[..., 124], a[..., 124])



def _pillars() -> PillarEncoder:
    grid = BevGridSpec(dims=(16, 16), resolution_m=2.0, origin_m=(-16.0, -16.0))
    return PillarEncoder(grid, 8, BackboneConfig(in_channels=8, stage_channels=[4, 8], fused_channels=16, out_stride=4))


def test_pillars_empty_cloud():
    enc = _pillars()
    points, mask = clouds_to_tensor([PointCloud.empty()])
    assert not enc.pseudo_image(points, mask).any()
    feat = encode_pillars(PointCloud.empty(), enc)
    assert feat.values.shape == (1, 16, 4, 4)
    assert torch.isfinite(feat.values).all()


def test_pillars_ignore_point_order(rng):
    enc = _pillars()
    pts = rng.uniform(-15, 15, size=(300, 3))
    a, mask = clouds_to_tensor([PointCloud(points=pts)])
    b, _ = clouds_to_tensor([PointCloud(points=pts[rng.permutation(300)])])
    assert torch.equal(enc.pseudo_image(a, mask), enc.pseudo_image(b, mask))


def test_pillars_drop_points_outside_grid():
    enc = _pillars()
    points, mask = clouds_to_tensor([PointCloud(points=[[100.0, 0.0, 0.0], [0.0, -40.0, 1.0]])])
    assert not enc.pseudo_image(points, mask).any()


def _lift(channels: int = 4) -> LiftToBEV:
    grid = BevGridSpec(dims=(64, 64), resolution_m=0.8, origin_m=(0.0, -25.6))
    return LiftToBEV(CameraSpec(), 8, grid, channels, depth_bins=32, depth_min_m=1.0, depth_max_m=50.0)


def test_lift_uniform_depth_conserves_mass():
    lift = _lift()
    torch.nn.init.zeros_(lift.depth_head.weight)
    torch.nn.init.zeros_(lift.depth_head.bias)
    values = torch.zeros(1, 4, 12, 20)
    values[0, :, 6, 10] = torch.tensor([1.0, 2.0, 0.5, 3.0])  # optical-axis pixel
    out = lift_image_to_bev(FeatureMap(values, 8, "camera"), lift)
    assert out.values.shape == (1, 4, 64, 64)
    assert out.sensor_tag == "camera"
    assert out.values.abs().sum().item() == pytest.approx(values.abs().sum().item(), rel=1e-4)
    assert int((out.values[0, 0] != 0).sum()) == 32


def test_lift_one_hot_depth_hits_one_cell():
    lift = _lift()
    values = torch.zeros(1, 4, 12, 20)
    values[0, :, 6, 10] = 1.0
    probs = torch.zeros(1, 32, 12, 20)
    probs[0, 5, 6, 10] = 1.0
    bev = lift.splat(values, probs)
    assert int((bev[0, 0] != 0).sum()) == 1


def test_lift_zero_features():
    out = _lift()(FeatureMap(torch.zeros(2, 4, 12, 20), 8, "camera"))
    assert not out.values.any()


def test_lift_rejects_wrong_feature_shape():
    with pytest.raises(ValueError):
        _lift().splat(torch.zeros(1, 4, 6, 10), torch.zeros(1, 32, 6, 10))


def test_pool_zero_input_zero_bias():
    pool = VectorPool(8, 5)
    for m in pool.modules():
        if getattr(m, "bias", None) is not None:
            torch.nn.init.zeros_(m.bias)
    out = pool_to_vector(FeatureMap(torch.zeros(1, 8, 6, 6), 4, "lidar"), pool)
    assert torch.equal(out, torch.zeros(1, 5))


@pytest.mark.parametrize("hw", [(4, 4), (5, 9), (12, 20)])
def test_pool_output_length(hw):
    assert VectorPool(8, 5)(torch.rand(2, 8, *hw)).shape == (2, 5)


def test_linear_pool_is_homogeneous():
    pool = VectorPool(8, 5, activation=False, bias=False).double()
    x = torch.rand(1, 8, 8, 8, dtype=torch.float64)
    torch.testing.assert_close(pool(2 * x), 2 * pool(x))


def test_encoders_finite_on_synthworld_frames(tiny_cfg):
    world = init_world(3, 4, tiny_cfg.world)
    ego = EgoState(position_m=world.road_waypoints[0])
    rgb, _ = render_rgbd(world, ego, tiny_cfg.camera, tiny_cfg.world)
    cloud = cast_lidar(world, ego, tiny_cfg.lidar.rings, tiny_cfg.lidar.azimuths, tiny_cfg.lidar)
    rv = project_range_view(cloud, tiny_cfg.lidar.rings, tiny_cfg.lidar.azimuths, tiny_cfg.lidar).channels

    image = ImageEncoder(tiny_cfg.model.image_backbone)(torch.as_tensor(rgb[None], dtype=torch.float32))
    lidar = RangeViewEncoder(tiny_cfg.model.range_backbone, tiny_cfg.lidar.max_range_m)(
        torch.as_tensor(rv[None], dtype=torch.float32)
    )
    assert torch.isfinite(image.values).all() and torch.isfinite(lidar.values).all()
    assert np.isfinite(rv).all()
