"""Run configuration as a line-based ``key = value`` file."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields

from .codec import ORDERS
from .decoder import DecoderConfig
from .encoder import FEATURE_VARIANTS, EncoderConfig
from .fusion import FUSION_KINDS, FusionConfig
from .model import ModelConfig

UPDATE_MODES = ("likelihood", "naive", "off")
MIX_KINDS = ("equal", "proportional_videos", "proportional_images")
RUN_TASKS = ("rgb", "multi", "depth", "thermal", "event", "language")


@dataclass
class RunConfig:
    # schedule
    seed: int = 0
    steps: int = 20000
    batch_size: int = 4
    lr_encoder: float = 1e-4
    lr_decoder: float = 1e-3
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    lr_drop_frac: float = 0.8
    checkpoint_every: int = 0
    # model
    image_size: int = 64
    patch_size: int = 8
    enc_depth: int = 4
    dim: int = 64
    heads: int = 4
    ffn_dim: int = 256
    dec_depth: int = 2
    n_bins: int = 4000
    order: str = "xywh"
    bidirectional: bool = False
    joint: bool = True
    feature_variant: str = "search"
    # cropping
    search_factor: float = 4.0
    template_factor: float = 4.0
    template_size: int = 0          # 0: same as image_size
    # data
    canvas: int = 128
    train_videos: int = 400
    video_length: int = 100
    max_gap: int = 50
    # tracking
    window: bool = True
    update_mode: str = "off"
    update_interval: int = 25
    update_threshold: float = 0.015
    eval_videos: int = 20
    eval_length: int = 100
    # multi-modal
    task: str = "rgb"
    fusion: str = "lowrank"
    rank: int = 32
    enc_prompt: bool = True
    dec_prompt: bool = True
    freeze_base: bool = True
    mix: str = "equal"
    base_checkpoint: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.order in ORDERS, f"order must be one of {ORDERS}"),
            (self.feature_variant in FEATURE_VARIANTS, f"feature_variant must be one of {FEATURE_VARIANTS}"),
            (self.update_mode in UPDATE_MODES, f"update_mode must be one of {UPDATE_MODES}"),
            (self.fusion in FUSION_KINDS, f"fusion must be one of {FUSION_KINDS}"),
            (self.mix in MIX_KINDS, f"mix must be one of {MIX_KINDS}"),
            (self.task in RUN_TASKS, f"task must be one of {RUN_TASKS}"),
            (self.steps >= 0, "steps must be non-negative"),
            (self.batch_size >= 1, "batch_size must be positive"),
            (self.n_bins >= 2, "n_bins must be at least 2"),
            (self.search_factor > 0 and self.template_factor > 0, "crop factors must be positive"),
            (self.max_gap >= 1, "max_gap must be at least 1"),
            (self.video_length >= 2 and self.eval_length >= 2, "videos need at least 2 frames"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(f"invalid config: {msg}")

    # -- text form --------------------------------------------------------

    def render(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                text = "true" if v else "false"
            elif isinstance(v, float):
                text = repr(v)
            else:
                text = str(v)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        values = dataclasses.asdict(base) if base is not None else {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            values[key] = val
        return cls.from_mapping(values)

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(values) - set(types))
        if unknown:
            raise ValueError(f"unknown config key(s): {', '.join(unknown)}")
        kw = {k: _coerce(k, types[k], v) for k, v in values.items()}
        return cls(**kw)

    def replace(self, **changes) -> "RunConfig":
        return RunConfig.from_mapping({**dataclasses.asdict(self), **changes})

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        with open(path) as f:
            return cls.parse(f.read())

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            f.write(self.render())

    def digest(self, keys: tuple[str, ...] | None = None) -> str:
        """Short hash of the rendered config (or a subset of keys), for cache names."""
        text = self.render() if keys is None else "".join(f"{k}={getattr(self, k)!r};" for k in keys)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    # -- derived objects --------------------------------------------------

    @property
    def tsize(self) -> int:
        return self.template_size or self.image_size

    def model_config(self) -> ModelConfig:
        enc = EncoderConfig(image_size=self.image_size, template_size=self.template_size or None,
                            patch_size=self.patch_size, depth=self.enc_depth, dim=self.dim,
                            heads=self.heads, ffn_dim=self.ffn_dim, joint_extraction=self.joint,
                            out_dim=self.dim)
        dec = DecoderConfig(depth=self.dec_depth, dim=self.dim, heads=self.heads, ffn_dim=self.ffn_dim,
                            n_bins=self.n_bins, bidirectional=self.bidirectional)
        return ModelConfig(encoder=enc, decoder=dec, feature_variant=self.feature_variant, order=self.order)

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(kind=self.fusion, rank=self.rank, enc_prompt=self.enc_prompt,
                            dec_prompt=self.dec_prompt)


def _coerce(key: str, typ, value):
    if not isinstance(value, str):
        return value
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            low = value.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(value)
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse {value!r} as {typ}") from None
    return value
