# skeleton_encoder.py
# Heatmap volume -> 256-d pose descriptor h_p -> D-d projection.

import numpy as np

import numeric as nm
from config import NUM_JOINTS, SKELETON_CHANNELS
from errors import ConfigError, DimensionError

ACTIVATIONS = {"gelu": nm.gelu, "identity": nm.identity}


def kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class SkeletonEncoder:
    """Three conv3d stages (64, 128, 256 channels by default), spatial stride 2,
    temporal stride 1, padding 1; global average pool; W_p projection.

    Joints are the input channels and time is the conv depth axis, so a
    volume enters as (J, T, H, W) or batched as (B, J, T, H, W).
    """

    def __init__(self, rng, projection_dim, num_joints=NUM_JOINTS,
                 channels=SKELETON_CHANNELS, activation="gelu"):
        if activation not in ACTIVATIONS:
            raise ConfigError(f"Unknown activation '{activation}'")
        self.activation = activation
        self.channels = tuple(channels)
        self.stride = (1, 2, 2)
        self.params = {}
        c_in = num_joints
        for i, c_out in enumerate(self.channels, start=1):
            fan_in = c_in * 27
            self.params[f"stage{i}.weight"] = nm.parameter(
                kaiming_uniform(rng, (c_out, c_in, 3, 3, 3), fan_in), name=f"skeleton.stage{i}.weight")
            self.params[f"stage{i}.bias"] = nm.parameter(np.zeros(c_out), name=f"skeleton.stage{i}.bias")
            c_in = c_out
        self.params["proj.weight"] = nm.parameter(
            kaiming_uniform(rng, (projection_dim, c_in), c_in), name="skeleton.proj.weight")

    @staticmethod
    def check_canvas(height, width):
        for size in (height, width):
            if size < 8 or size % 8:
                raise ConfigError(f"heatmap canvas {height}x{width} is too small for three spatial halvings")

    def named_parameters(self):
        return dict(self.params)

    def stage_shapes(self, volume_shape):
        """Output shape of each stage for a (J, T, H, W) input."""
        _, t, h, w = volume_shape
        shapes = []
        for c_out in self.channels:
            h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
            shapes.append((c_out, t, h, w))
        return shapes

    def forward(self, volume):
        """Returns (h_p, h_p_proj): (256,) and (D,), or batched (B, 256), (B, D)."""
        x = nm.as_tensor(volume)
        if x.ndim not in (4, 5):
            raise DimensionError(f"skeleton encoder expects (J,T,H,W) or (B,J,T,H,W), got {x.shape}")
        self.check_canvas(*x.shape[-2:])
        act = ACTIVATIONS[self.activation]
        for i in range(1, len(self.channels) + 1):
            x = nm.conv3d(x, self.params[f"stage{i}.weight"], self.params[f"stage{i}.bias"],
                          stride=self.stride, padding=1)
            x = act(x)
        h_p = nm.global_avg_pool(x, axes=(-3, -2, -1))
        h_proj = nm.linear(h_p, self.params["proj.weight"]) if h_p.ndim == 2 else \
            nm.reshape(nm.linear(nm.reshape(h_p, (1, -1)), self.params["proj.weight"]), (-1,))
        return h_p, h_proj


def skeleton_forward(volume, encoder):
    """Encode one HeatmapVolume (T, J, H, W) into (h_p, h_p_proj)."""
    data = volume.channel_major() if hasattr(volume, "channel_major") else volume
    return encoder.forward(data)
