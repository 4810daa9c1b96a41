"""Export, checkpointing and int16 weight quantization with calibration."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import Config
from .container import ModelContainer, TensorEntry
from .models import StudentModel

log = logging.getLogger(__name__)

INT16_MAX = 32767
TRAINING_ONLY_PREFIXES = ("pca.", "gl.", "disc.")
# Reference numbers for the production target; informational only.
TARGET_METADATA = {"target_binary_mb": "24.6", "target_runtime_ms": "35", "target_image_size": "300"}


def config_metadata(cfg: Config, checkpoint: bool) -> dict[str, str]:
    meta = {
        "embed_dim": str(cfg.embed_dim),
        "image_size": str(cfg.image_size),
        "checkpoint": "true" if checkpoint else "false",
    }
    meta.update(TARGET_METADATA)
    meta.update({f"config.{k}": v for k, v in cfg.to_dict().items()})
    return meta


def config_from_metadata(meta: dict[str, str]) -> Config:
    lines = [f"{k[len('config.'):]}={v}" for k, v in meta.items() if k.startswith("config.")]
    if not lines:
        raise ValueError("container metadata carries no config echo")
    return Config.from_lines(lines)


def _module_tensors(prefix: str, module: torch.nn.Module, dtype: str):
    for name, p in module.state_dict().items():
        yield f"{prefix}{name}", TensorEntry(f"{prefix}{name}", dtype, p.detach().cpu().numpy())


def export_student(student: StudentModel, dtype: str = "fp32") -> ModelContainer:
    """Backbone and head tensors only; projectors and discriminator never enter."""
    c = ModelContainer(metadata=config_metadata(student.cfg, checkpoint=False))
    for name, entry in _module_tensors("", student, dtype):
        c.tensors[name] = entry
    return c


def save_checkpoint(student, pca=None, gl=None, disc=None, dtype: str = "fp64") -> ModelContainer:
    c = export_student(student, dtype=dtype)
    c.metadata["checkpoint"] = "true"
    for prefix, module in (("pca.", pca), ("gl.", gl), ("disc.", disc)):
        if module is not None:
            for name, entry in _module_tensors(prefix, module, dtype):
                c.tensors[name] = entry
    return c


def student_state(c: ModelContainer) -> dict[str, torch.Tensor]:
    return {
        name: torch.from_numpy(t.dequantize())
        for name, t in c.tensors.items()
        if not name.startswith(TRAINING_ONLY_PREFIXES)
    }


def prefixed_state(c: ModelContainer, prefix: str) -> dict[str, torch.Tensor]:
    return {
        name[len(prefix):]: torch.from_numpy(t.dequantize())
        for name, t in c.tensors.items()
        if name.startswith(prefix)
    }


def student_from_container(c: ModelContainer, dtype=torch.float64) -> StudentModel:
    """Rebuild the student; int16 tensors are dequantized here."""
    cfg = config_from_metadata(c.metadata)
    student = StudentModel(cfg, dtype=dtype)
    state = {k: v.to(dtype) for k, v in student_state(c).items()}
    student.load_state_dict(state, strict=True)
    student.eval()
    return student


def is_weight(name: str, data: np.ndarray) -> bool:
    """Matrices and conv kernels are quantized; biases and 1-D parameters stay fp32."""
    return data.ndim >= 2


def quantize_tensor(x: np.ndarray, percentile: float = 100.0) -> tuple[np.ndarray, float]:
    """Symmetric int16: q = round(clamp(x, +-c) / s), s = c / 32767, c = |x| percentile."""
    x = np.asarray(x, dtype=np.float64)
    clip = float(np.percentile(np.abs(x), percentile)) if x.size else 0.0
    if clip / INT16_MAX < np.finfo(np.float32).tiny:
        # zero tensor, or magnitudes below what an fp32 scale can resolve
        return np.zeros(x.shape, dtype=np.int16), 1.0
    scale = float(np.float32(clip / INT16_MAX))
    q = np.rint(np.clip(x, -clip, clip) / scale)
    return np.clip(q, -INT16_MAX, INT16_MAX).astype(np.int16), scale


@dataclass
class QuantizationReport:
    scales: dict[str, float] = field(default_factory=dict)
    percentiles: dict[str, float] = field(default_factory=dict)
    candidate_cosines: dict[str, dict[float, float]] = field(default_factory=dict)
    calibration_cosine: float = float("nan")
    baseline_cosine: float = float("nan")

    def lines(self) -> list[str]:
        out = [f"calibration mean cosine: {self.calibration_cosine:.8f} "
               f"(all tensors at first candidate: {self.baseline_cosine:.8f})"]
        for name in self.scales:
            out.append(f"{name}: percentile={self.percentiles[name]:g} scale={self.scales[name]:.6g}")
        return out


def _mean_cosine(student: StudentModel, images: torch.Tensor, reference: torch.Tensor) -> float:
    with torch.no_grad():
        emb = student.embed(images)
    cos = torch.nn.functional.cosine_similarity(emb, reference, dim=-1)
    return float(cos.mean())


def quantize_weights(container: ModelContainer, calibration_images,
                     percentile_candidates=(100.0, 99.99, 99.9)) -> tuple[ModelContainer, QuantizationReport]:
    """Replace every weight tensor by int16, picking each tensor's clip percentile on calibration data.

    Tensors start at the first candidate; then, one tensor at a time, the
    candidate giving the highest mean cosine between full-precision and
    dequantized-model embeddings is kept (earlier candidate wins ties).
    """
    images = torch.as_tensor(np.asarray(calibration_images), dtype=torch.float64)
    if images.dim() != 4 or images.shape[0] == 0:
        raise ValueError("calibration set must be a nonempty batch of images")
    candidates = [float(p) for p in percentile_candidates]
    if not candidates:
        raise ValueError("need at least one percentile candidate")
    if any(n.startswith(TRAINING_ONLY_PREFIXES) for n in container.tensors):
        raise ValueError("quantize an exported student, not a training checkpoint")

    fp_student = student_from_container(container)
    with torch.no_grad():
        reference = fp_student.embed(images)

    weights = [n for n, t in container.tensors.items() if is_weight(n, t.data)]
    fp = {n: container.tensors[n].dequantize() for n in weights}
    quantized = {n: {p: quantize_tensor(fp[n], p) for p in candidates} for n in weights}
    choice = {n: candidates[0] for n in weights}

    work = student_from_container(container)
    state = work.state_dict()

    def load(name, p):
        q, s = quantized[name][p]
        with torch.no_grad():
            state[name].copy_(torch.from_numpy(q.astype(np.float64) * s))

    for n in weights:
        load(n, choice[n])
    report = QuantizationReport()
    report.baseline_cosine = _mean_cosine(work, images, reference)

    for n in weights:
        scores = {}
        for p in candidates:
            load(n, p)
            scores[p] = _mean_cosine(work, images, reference)
        best = max(candidates, key=lambda p: (scores[p], -candidates.index(p)))
        assert all(scores[best] >= v for v in scores.values())
        choice[n] = best
        load(n, best)
        report.candidate_cosines[n] = scores

    report.calibration_cosine = _mean_cosine(work, images, reference)
    out = ModelContainer(metadata=dict(container.metadata), version=container.version)
    out.metadata["quantization"] = "int16-weight-only"
    for name, entry in container.tensors.items():
        if name in choice:
            q, s = quantized[name][choice[name]]
            out.tensors[name] = TensorEntry(name, "int16", q, s)
            report.scales[name] = s
            report.percentiles[name] = choice[name]
        else:
            out.tensors[name] = TensorEntry(name, "fp32", entry.data.astype(np.float32))
    log.info("calibration mean cosine %.6f", report.calibration_cosine)
    return out, report
