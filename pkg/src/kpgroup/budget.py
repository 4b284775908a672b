"""Output-channel and memory accounting for grouped and ungrouped heads."""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

from .errors import ValidationError

MIB = 1024 * 1024
_INPUT_CHANNELS = 3
_FP32_BYTES = 4


@dataclass(frozen=True)
class HeadBudget:
    classes: int
    m_reg: int
    m_heat: int

    @property
    def center_heatmap(self) -> int:
        return self.classes

    center_offset = 2
    object_size = 2
    kp_offset = 2

    @property
    def kp_regression(self) -> int:
        return 2 * self.m_reg

    @property
    def kp_heatmap(self) -> int:
        return self.m_heat

    @property
    def total(self) -> int:
        return (self.center_heatmap + self.center_offset + self.object_size
                + self.kp_regression + self.kp_heatmap + self.kp_offset)

    def breakdown(self) -> dict[str, int]:
        return {
            "center_heatmap": self.center_heatmap,
            "center_offset": self.center_offset,
            "object_size": self.object_size,
            "kp_regression": self.kp_regression,
            "kp_heatmap": self.kp_heatmap,
            "kp_offset": self.kp_offset,
            "total": self.total,
        }


def head_channels(classes: int, m_reg: int, m_heat: int) -> HeadBudget:
    """Channel budget: C + 2 + 2 + 2*m_reg + m_heat + 2."""
    if classes < 1 or m_reg < 1 or m_heat < 1:
        raise ValidationError("classes and cluster counts must be >= 1")
    return HeadBudget(classes, m_reg, m_heat)


def output_tensor_bytes(
    input_h: int,
    input_w: int,
    total_channels: int,
    bytes_per_value: int = 4,
    stride: int = 4,
) -> int:
    """Bytes to store all output maps at 1/stride of the input resolution."""
    if input_h % stride or input_w % stride:
        raise ValidationError(
            f"input {input_h}x{input_w} not divisible by stride {stride}"
        )
    return (input_h // stride) * (input_w // stride) * total_channels * bytes_per_value


def bytes_to_mib(n_bytes: int) -> float:
    return n_bytes / MIB


def input_tensor_mib(input_h: int, input_w: int) -> float:
    return input_h * input_w * _INPUT_CHANNELS * _FP32_BYTES / MIB


def output_share_percent(
    output_mib: float,
    encoder_weights_mib: float,
    encoder_activations_mib: float,
    input_h: int,
    input_w: int,
) -> float:
    """Output maps as a share of weights + activations + input memory."""
    if output_mib <= 0 or encoder_weights_mib <= 0 or encoder_activations_mib <= 0:
        raise ValidationError("memory figures must be positive")
    total = encoder_weights_mib + encoder_activations_mib + input_tensor_mib(
        input_h, input_w
    )
    return 100.0 * output_mib / total


@dataclass(frozen=True)
class EncoderProfile:
    """User-supplied encoder memory figures (we never compute these)."""

    name: str
    weights_mib: float
    activations_mib: dict[int, float]  # input resolution -> MiB

    def resolutions(self) -> list[int]:
        return sorted(self.activations_mib)


def load_encoder_profiles() -> list[EncoderProfile]:
    """Bundled reference figures for a few common encoders."""
    raw = json.loads(
        resources.files("kpgroup.data").joinpath("encoder_profiles.json").read_text()
    )
    return [
        EncoderProfile(
            p["name"],
            float(p["weights_mib"]),
            {int(k): float(v) for k, v in p["activations_mib"].items()},
        )
        for p in raw["encoders"]
    ]


def budget_report(
    classes: int,
    m_reg: int,
    m_heat: int,
    resolution: int,
    profiles: list[EncoderProfile] | None = None,
) -> str:
    """Plain-text report: channel breakdown plus per-encoder memory shares."""
    hb = head_channels(classes, m_reg, m_heat)
    out_bytes = output_tensor_bytes(resolution, resolution, hb.total)
    out_mib = bytes_to_mib(out_bytes)

    lines = [
        f"channels: {hb.total} = {hb.center_heatmap} + {hb.center_offset} + "
        f"{hb.object_size} + {hb.kp_regression} + {hb.kp_heatmap} + {hb.kp_offset}",
        f"  center_heatmap={hb.center_heatmap} center_offset={hb.center_offset} "
        f"object_size={hb.object_size} kp_regression={hb.kp_regression} "
        f"kp_heatmap={hb.kp_heatmap} kp_offset={hb.kp_offset}",
        f"output tensors at {resolution}x{resolution}: "
        f"{out_bytes} B = {out_mib:.1f} MiB",
    ]
    if profiles is None:
        profiles = load_encoder_profiles()
    rows = []
    for p in profiles:
        if resolution not in p.activations_mib:
            continue
        share = output_share_percent(
            out_mib, p.weights_mib, p.activations_mib[resolution],
            resolution, resolution,
        )
        rows.append((p.name, p.weights_mib, p.activations_mib[resolution], share))
    if rows:
        lines.append("")
        lines.append(f"{'encoder':<12}{'weights':>10}{'activ.':>10}"
                     f"{'output':>10}{'share':>8}")
        for name, w, a, share in rows:
            lines.append(
                f"{name:<12}{w:>10.1f}{a:>10.1f}{out_mib:>10.1f}{share:>7.1f}%"
            )
    return "\n".join(lines)
