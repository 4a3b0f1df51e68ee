"""Architecture configuration and validation for the tri-decoder network."""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass


class Bottleneck(str, enum.Enum):
    """Deepest-stage flavour: shift-based token MLP or windowed attention."""

    TOKEN_MLP = "token_mlp"
    SWIN = "swin"


# The windowed-attention bottleneck mirrors the deepest encoder stage of a
# standard Swin UNet: two blocks, heads continuing the doubling pattern.
SWIN_BOTTLENECK_DEPTH = 2
# Channel groups used by the axial token shift in the MLP bottleneck.
TOKEN_SHIFT_GROUPS = 5

N_DECODERS = 3


class ConfigError(ValueError):
    """Raised when a configuration violates a structural constraint."""


@dataclass(frozen=True)
class ModelConfig:
    """Every architectural hyperparameter plus the ablation toggles.

    Defaults are desk scale (128 px inputs); paper-scale runs use
    input_size=512.  ``attention_sharing`` and ``bottleneck`` are the AS and
    MLP ablation toggles.
    """

    input_size: int = 128
    in_channels: int = 1
    patch_size: int = 4
    embed_dim: int = 96
    encoder_depths: tuple[int, ...] = (2, 2, 2)
    # One block per decoder stage keeps the three decoders light; they still
    # mirror the encoder's stage structure and skip connections.
    decoder_depths: tuple[int, ...] = (1, 1, 1)
    heads_per_stage: tuple[int, ...] = (3, 6, 12)
    window_size: int = 7
    shared_head_fraction: float = 0.5
    bottleneck: Bottleneck = Bottleneck.TOKEN_MLP
    attention_sharing: bool = True
    num_classes_per_branch: int = 2

    def __post_init__(self):
        object.__setattr__(self, "encoder_depths", tuple(self.encoder_depths))
        object.__setattr__(self, "decoder_depths", tuple(self.decoder_depths))
        object.__setattr__(self, "heads_per_stage", tuple(self.heads_per_stage))
        object.__setattr__(self, "bottleneck", Bottleneck(self.bottleneck))
        self.validate()

    # -- derived quantities -------------------------------------------------

    @property
    def n_stages(self) -> int:
        return len(self.encoder_depths)

    def stage_dim(self, stage: int) -> int:
        return self.embed_dim * (2 ** stage)

    def stage_side(self, stage: int, input_size: int | None = None) -> int:
        size = self.input_size if input_size is None else input_size
        return size // self.patch_size // (2 ** stage)

    @property
    def bottleneck_dim(self) -> int:
        return self.embed_dim * (2 ** self.n_stages)

    def bottleneck_side(self, input_size: int | None = None) -> int:
        size = self.input_size if input_size is None else input_size
        return size // self.patch_size // (2 ** self.n_stages)

    @property
    def bottleneck_heads(self) -> int:
        return self.heads_per_stage[-1] * 2

    def shared_heads(self, stage: int) -> int:
        """m = round(fraction * heads); ties round to even (Python round)."""
        if not self.attention_sharing:
            return 0
        return round(self.shared_head_fraction * self.heads_per_stage[stage])

    # -- validation ----------------------------------------------------------

    def validate(self) -> None:
        div = self.patch_size * (2 ** self.n_stages)
        if self.input_size % div != 0:
            raise ConfigError(
                f"input_size must be divisible by patch_size * 2^n_stages "
                f"= {div}, got {self.input_size}"
            )
        if len(self.heads_per_stage) != self.n_stages:
            raise ConfigError(
                f"heads_per_stage needs one entry per encoder stage "
                f"({self.n_stages}), got {len(self.heads_per_stage)}"
            )
        if len(self.decoder_depths) != self.n_stages:
            raise ConfigError(
                f"decoder_depths needs one entry per stage ({self.n_stages}), "
                f"got {len(self.decoder_depths)}"
            )
        for k, heads in enumerate(self.heads_per_stage):
            if heads <= 0 or self.stage_dim(k) % heads != 0:
                raise ConfigError(
                    f"heads_per_stage[{k}]={heads} must divide the stage "
                    f"width {self.stage_dim(k)}"
                )
        if self.bottleneck is Bottleneck.SWIN \
                and self.bottleneck_dim % self.bottleneck_heads != 0:
            raise ConfigError(
                f"bottleneck heads {self.bottleneck_heads} must divide the "
                f"bottleneck width {self.bottleneck_dim}"
            )
        if not 0.0 <= self.shared_head_fraction <= 1.0:
            raise ConfigError(
                f"shared_head_fraction must lie in [0, 1], got "
                f"{self.shared_head_fraction}"
            )
        if self.num_classes_per_branch != 2:
            raise ConfigError(
                f"num_classes_per_branch is fixed at 2, got "
                f"{self.num_classes_per_branch}"
            )
        if self.in_channels not in (1, 3):
            raise ConfigError(
                f"in_channels must be 1 or 3, got {self.in_channels}")
        if min(self.encoder_depths) < 1 or min(self.decoder_depths) < 1:
            raise ConfigError("every stage needs at least one block")
        if self.window_size < 2:
            raise ConfigError(f"window_size must be >= 2, got {self.window_size}")
        if self.patch_size < 1 or self.patch_size & (self.patch_size - 1) != 0:
            raise ConfigError(
                f"patch_size must be a power of two, got {self.patch_size}")
        if self.embed_dim % self.patch_size != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} must be divisible by patch_size "
                f"{self.patch_size} for the final expansion")
        if self.bottleneck_side() < 1:
            raise ConfigError(
                f"input_size {self.input_size} leaves no tokens at the "
                f"bottleneck"
            )

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        data = asdict(self)
        data["bottleneck"] = self.bottleneck.value
        data["encoder_depths"] = list(self.encoder_depths)
        data["decoder_depths"] = list(self.decoder_depths)
        data["heads_per_stage"] = list(self.heads_per_stage)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    def with_toggles(self, mlp: bool | None = None,
                     sharing: bool | None = None) -> "ModelConfig":
        """Copy with the MLP / AS ablation toggles overridden."""
        data = self.to_dict()
        if mlp is not None:
            data["bottleneck"] = (
                Bottleneck.TOKEN_MLP if mlp else Bottleneck.SWIN).value
        if sharing is not None:
            data["attention_sharing"] = sharing
        return ModelConfig.from_dict(data)
