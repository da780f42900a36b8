"""SE-gated fusion of the audio/face/body streams, classification heads and the training loss."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .config import MODALITIES, ModelConfig
from .encoders import AudioEncoder, VisualBackboneOutput, VisualEncoder
from .nn_blocks import MultiHeadSelfAttention, SEBlock, sinusoidal_positions, weighted_cross_entropy


def modality_slices(embed_dim: int = 128) -> dict:
    """Fixed channel layout of the fused vector: audio, face, body."""
    return {m: slice(i * embed_dim, (i + 1) * embed_dim) for i, m in enumerate(MODALITIES)}


def keep_mask(zero=(), embed_dim: int = 128) -> torch.Tensor | None:
    """Boolean channel mask for the fused vector, or None when nothing is zeroed."""
    zero = {z.lower() for z in zero}
    unknown = zero - set(MODALITIES)
    if unknown:
        raise ValueError(f"unknown modalities: {sorted(unknown)}")
    if not zero:
        return None
    keep = torch.ones(3 * embed_dim, dtype=torch.bool)
    for name, sl in modality_slices(embed_dim).items():
        if name in zero:
            keep[sl] = False
    return keep


@dataclass
class FusedSequence:
    values: torch.Tensor  # (N, T, 3D), gated
    fusion_gate: torch.Tensor  # (N, 3D)
    raw: torch.Tensor  # (N, T, 3D), ungated concatenation
    embed_dim: int = 128

    @property
    def modality_slices(self):
        return modality_slices(self.embed_dim)


class Fusion(nn.Module):
    """Concatenate (audio, face, body) and gate the 3D channels with an SE block.

    The squeeze is the temporal mean of each channel within a clip.
    """

    def __init__(self, embed_dim: int = 128, se_reduction: int = 16):
        super().__init__()
        self.embed_dim = embed_dim
        self.se = SEBlock(3 * embed_dim, se_reduction)

    def forward(self, audio, face, body, zero=(), gate=None) -> FusedSequence:
        if not audio.shape[:2] == face.shape[:2] == body.shape[:2]:
            raise ValueError(
                f"stream lengths differ: {tuple(audio.shape)}, {tuple(face.shape)}, {tuple(body.shape)}"
            )
        cat = torch.cat([audio, face, body], dim=-1).transpose(1, 2)  # (N, 3D, T)
        keep = keep_mask(zero, self.embed_dim)
        values, g = self.se(cat, keep=keep, gate=gate)
        return FusedSequence(values.transpose(1, 2), g, cat.transpose(1, 2), self.embed_dim)


def apply_modality_mask(seq: FusedSequence, zero) -> FusedSequence:
    """Zero the gate entries (and thus the outputs) of the listed modalities.

    This operates on an already fused sequence and cannot undo the influence
    the zeroed streams had on the other gate entries through the squeeze; use
    ``BIASModel(..., zero=...)`` for the fully isolated ablation.
    """
    keep = keep_mask(zero, seq.embed_dim)
    if keep is None:
        return seq
    zero_ = torch.zeros((), dtype=seq.values.dtype)
    gate = torch.where(keep[None, :], seq.fusion_gate, zero_)
    values = torch.where(keep[None, None, :], seq.raw * gate[:, None, :], zero_)
    return FusedSequence(values, gate, seq.raw, seq.embed_dim)


class Classifier(nn.Module):
    """Self-attention over the fused sequence, then a per-frame 3D -> 2 linear layer."""

    def __init__(self, dim: int, heads: int = 8, attention: bool = True):
        super().__init__()
        self.attention = MultiHeadSelfAttention(dim, heads) if attention else None
        self.head = nn.Linear(dim, 2)

    def forward(self, values):
        if self.attention is not None:
            pos = sinusoidal_positions(values.shape[1], values.shape[2], values.dtype)
            values = self.attention(values + pos)
        return self.head(values)


@dataclass
class ModelOutput:
    logits: torch.Tensor  # (N, T, 2)
    aux_logits: dict      # modality -> (N, T, 2)
    fused: FusedSequence
    face: VisualBackboneOutput
    body: VisualBackboneOutput
    embeddings: dict = field(default_factory=dict)

    @property
    def scores(self):
        """Speaking probability per frame, ``softmax(logits)[..., 1]``."""
        return torch.softmax(self.logits, dim=-1)[..., 1]


class BIASModel(nn.Module):
    """Audio + face + body active speaker model.

    Face and body use two independent instances of the same visual encoder.
    Auxiliary per-stream linear heads only feed the training loss.
    """

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        self.face_encoder = VisualEncoder(cfg)
        self.body_encoder = VisualEncoder(cfg)
        self.audio_encoder = AudioEncoder(cfg.audio_widths, cfg.audio_blocks, cfg.se_reduction,
                                          cfg.embed_dim)
        self.fusion = Fusion(cfg.embed_dim, cfg.se_reduction)
        self.classifier = Classifier(3 * cfg.embed_dim, cfg.heads, "fused" in cfg.attention_sites)
        self.aux_heads = nn.ModuleDict({m: nn.Linear(cfg.embed_dim, 2) for m in MODALITIES})

    def forward(self, face, body, mfcc, zero=(), aux=True) -> ModelOutput:
        if face.ndim == 4:  # single clip
            face, body, mfcc = face[None], body[None], mfcc[None]
        face_emb, face_out = self.face_encoder(face)
        body_emb, body_out = self.body_encoder(body)
        audio_emb = self.audio_encoder(mfcc)
        fused = self.fusion(audio_emb, face_emb, body_emb, zero=zero)
        logits = self.classifier(fused.values)
        embeddings = {"audio": audio_emb, "face": face_emb, "body": body_emb}
        aux_logits = {m: self.aux_heads[m](embeddings[m]) for m in MODALITIES} if aux else {}
        return ModelOutput(logits, aux_logits, fused, face_out, body_out, embeddings)


def total_loss(logits, aux_logits: dict, labels, fused_weight=1.0, aux_weights=(0.4, 0.4, 0.4),
               class_weights=(1.0, 1.0)):
    """``fused_weight * CE(fused) + sum_k aux_weight_k * CE(aux_k)`` with weighted CE."""
    loss = fused_weight * weighted_cross_entropy(logits, labels, class_weights)
    for name, weight in zip(MODALITIES, aux_weights):
        if weight:
            loss = loss + weight * weighted_cross_entropy(aux_logits[name], labels, class_weights)
    return loss
