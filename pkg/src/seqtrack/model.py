"""SeqTrack encoder-decoder and its multi-modal extension."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .codec import Vocabulary
from .decoder import CausalDecoder, DecoderConfig
from .encoder import EncoderConfig, VisionEncoder, VisualFeatures, select_search_features
from .engine import Parameter, Value
from .fusion import FusionConfig, UnifiedInterface, resolve_missing
from .nn import Module


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    feature_variant: str = "search"
    order: str = "xywh"
    fusion: FusionConfig | None = None

    @property
    def n_bins(self) -> int:
        return self.decoder.n_bins


@dataclass
class AuxInputs:
    """Per-batch auxiliary inputs for the multi-modal model."""

    tasks: list[str]
    images: np.ndarray          # [B, 3, H, W] after resolving missing modalities
    texts: list[str]


class SeqTrack(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        if cfg.encoder.out_dim != cfg.decoder.dim:
            cfg.encoder.out_dim = cfg.decoder.dim
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.vocab = Vocabulary(cfg.decoder.n_bins)
        self.encoder = VisionEncoder(cfg.encoder, rng)
        self.decoder = CausalDecoder(cfg.decoder, rng)
        C = cfg.encoder.channels
        self.norm_mean = Parameter(np.full(C, 0.5, np.float32), requires_grad=False)
        self.norm_std = Parameter(np.full(C, 0.25, np.float32), requires_grad=False)
        self.fusion: UnifiedInterface | None = None
        if cfg.fusion is not None:
            self.attach_fusion(cfg.fusion, seed + 1)

    def attach_fusion(self, fcfg: FusionConfig, seed: int) -> UnifiedInterface:
        self.cfg.fusion = fcfg
        self.fusion = UnifiedInterface(fcfg, self.encoder, self.cfg.decoder.dim, self.cfg.n_bins,
                                       np.random.default_rng(seed))
        return self.fusion

    # -- parameter groups -------------------------------------------------

    def base_named_parameters(self):
        for name, p in self.named_parameters():
            if not name.startswith("fusion."):
                yield name, p

    def base_parameters(self) -> list[Parameter]:
        return [p for _, p in self.base_named_parameters()]

    def fusion_parameters(self) -> list[Parameter]:
        return self.fusion.parameters() if self.fusion is not None else []

    def encoder_parameters(self) -> list[Parameter]:
        return self.encoder.parameters()

    def freeze_base(self, frozen: bool = True) -> None:
        for name, p in self.base_named_parameters():
            if not name.startswith("norm_"):
                p.requires_grad = not frozen

    # -- forward ----------------------------------------------------------

    def normalize(self, images: np.ndarray) -> np.ndarray:
        m = self.norm_mean.data.reshape(1, -1, 1, 1)
        s = self.norm_std.data.reshape(1, -1, 1, 1)
        return ((images - m) / s).astype(self.norm_mean.dtype)

    def encode(self, templates: Sequence[np.ndarray], search: np.ndarray,
               aux: AuxInputs | None = None) -> VisualFeatures:
        """Encode raw [B, C, H, W] images in [0, 1]."""
        temps = [self.normalize(t) for t in templates]
        srch = self.normalize(search)
        hook = prompt = None
        if self.fusion is not None and aux is not None:
            seq = self.fusion.aux_sequence(self.normalize(aux.images), aux.texts)
            hook = self.fusion.bind(seq)
            prompt = self.fusion.encoder_prompts(aux.tasks)
        return self.encoder.encode_joint(temps, srch, hook, prompt)

    def memory(self, feats: VisualFeatures) -> Value:
        return select_search_features(feats, self.cfg.feature_variant)

    def first_tokens(self, batch: int, aux: AuxInputs | None = None) -> list[int]:
        if self.fusion is not None and aux is not None:
            return self.fusion.first_tokens(aux.tasks)
        return [self.vocab.start] * batch

    @property
    def prompt_table(self) -> Value | None:
        return self.fusion.dec_prompt if self.fusion is not None else None

    def forward(self, templates: Sequence[np.ndarray], search: np.ndarray, input_ids,
                aux: AuxInputs | None = None) -> Value:
        """Teacher-forced logits [B, 5, n_bins+1] (or [B, 4, .] when bidirectional)."""
        mem = self.memory(self.encode(templates, search, aux))
        return self.decoder.forward_teacher_forced(input_ids, mem, self.prompt_table)

    def step_logits(self, prefix_ids, memory: Value) -> Value:
        return self.decoder.decode_step(prefix_ids, memory, self.prompt_table)


def build_aux_inputs(tasks: Sequence[str], rgb: np.ndarray, aux_images: Sequence[np.ndarray | None],
                     texts: Sequence[str | None]) -> AuxInputs:
    """Resolve missing modalities per sample and stack into an :class:`AuxInputs`."""
    imgs, txts = [], []
    for b, task in enumerate(tasks):
        img, txt = resolve_missing(task, rgb[b], aux_images[b], texts[b])
        imgs.append(img)
        txts.append(txt)
    return AuxInputs(list(tasks), np.stack(imgs).astype(np.float32), txts)


def state_dict(model: Module) -> dict[str, np.ndarray]:
    return {name: p.data for name, p in model.named_parameters()}


def load_state_dict(model: Module, tensors: dict[str, np.ndarray], strict: bool = True) -> list[str]:
    """Copy tensors into matching parameters; returns the names of parameters left untouched."""
    params = dict(model.named_parameters())
    unexpected = sorted(set(tensors) - set(params))
    if strict and unexpected:
        raise KeyError(f"checkpoint has unknown tensors: {', '.join(unexpected[:5])}")
    missing = sorted(set(params) - set(tensors))
    if strict and missing:
        raise KeyError(f"checkpoint lacks tensors: {', '.join(missing[:5])}")
    for name, arr in tensors.items():
        if name in params:
            params[name].assign(arr)
    return missing
