"""Model hyperparameters and scale presets."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields


@dataclass
class NetworkConfig:
    """Architecture knobs for the calibration network.

    upsample_rate controls how far backbone stages are aggregated back up:
    the feature maps feeding the correlation have stride 32/upsample_rate
    relative to the input. window_radius is the correlation search radius
    (channel count (2*radius+1)^2 * num_heads). attn_window is the
    token-window edge for the windowed self-attention encoder.
    """

    input_wh: tuple[int, int] = (512, 256)
    upsample_rate: int = 4
    window_radius: int = 4
    num_heads: int = 4
    d_k: int = 256
    encoder_layers: int = 2
    decoder_layers: int = 6
    attn_window: int = 8
    use_multihead: bool = True
    use_encoder: bool = True
    use_transformer: bool = True
    width_mult: float = 1.0
    feature_dim: int = 64
    dense_layers: int = 3
    dense_growth: int = 64
    head_hidden: int = 256
    pos_hidden: int = 64
    mlp_ratio: int = 4
    deformable_upsampling: bool = False
    swap_correlation: bool = False
    pretrained_backbone: str | None = None

    def __post_init__(self):
        self.input_wh = tuple(self.input_wh)
        if self.upsample_rate not in (1, 2, 4, 8):
            raise ValueError(f"upsample_rate must be one of 1/2/4/8, got {self.upsample_rate}")
        if self.use_encoder and not self.use_transformer:
            raise ValueError("use_encoder requires use_transformer")
        if self.d_k % self.num_heads != 0:
            raise ValueError(f"d_k={self.d_k} not divisible by num_heads={self.num_heads}")
        w, h = self.input_wh
        if w % 32 or h % 32:
            raise ValueError(f"input {w}x{h} must be divisible by the full backbone stride 32")
        fw, fh = self.feature_wh
        if self.use_encoder and (fw % self.attn_window or fh % self.attn_window):
            raise ValueError(
                f"feature map {fw}x{fh} not divisible by attention window {self.attn_window}"
            )
        if self.window_radius < 1:
            raise ValueError("window_radius must be >= 1")

    @property
    def total_stride(self) -> int:
        return 32 // self.upsample_rate

    @property
    def feature_wh(self) -> tuple[int, int]:
        w, h = self.input_wh
        return w // self.total_stride, h // self.total_stride

    @property
    def correlation_heads(self) -> int:
        return self.num_heads if self.use_multihead else 1

    @property
    def correlation_channels(self) -> int:
        side = 2 * self.window_radius + 1
        return side * side * self.correlation_heads

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_wh"] = list(self.input_wh)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


def full_scale() -> NetworkConfig:
    """Road-dataset configuration (512x256 input, stride-8 features)."""
    return NetworkConfig(deformable_upsampling=_deform_available())


def desk_scale() -> NetworkConfig:
    """CPU-trainable configuration used by the shipped functional tests."""
    return NetworkConfig(
        input_wh=(256, 128),
        upsample_rate=4,
        window_radius=2,
        num_heads=2,
        d_k=64,
        encoder_layers=1,
        decoder_layers=2,
        attn_window=8,
        width_mult=0.25,
        feature_dim=16,
        dense_layers=2,
        dense_growth=32,
        head_hidden=128,
        pos_hidden=32,
        deformable_upsampling=False,
    )


def tiny() -> NetworkConfig:
    """Minimal configuration for unit tests and gradient checks."""
    return NetworkConfig(
        input_wh=(64, 32),
        upsample_rate=4,
        window_radius=1,
        num_heads=2,
        d_k=16,
        encoder_layers=1,
        decoder_layers=1,
        attn_window=4,
        width_mult=0.125,
        feature_dim=8,
        dense_layers=1,
        dense_growth=16,
        head_hidden=32,
        pos_hidden=16,
        mlp_ratio=2,
        deformable_upsampling=False,
    )


def _deform_available() -> bool:
    try:
        from torchvision.ops import DeformConv2d  # noqa: F401

        return True
    except Exception:
        return False
