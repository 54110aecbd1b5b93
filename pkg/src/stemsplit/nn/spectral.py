"""Differentiable bridge from real-valued masks to time-domain signals."""

from __future__ import annotations

import numpy as np

from ..dsp import StftConfig, istft_adjoint, istft_array
from .tensor import Tensor, _result, as_tensor


def masked_istft(mask, spec: np.ndarray, config: StftConfig, length: int) -> Tensor:
    """``istft(mask * spec)`` with the gradient taken w.r.t. the real ``mask``.

    ``mask`` and ``spec`` share shape ``(..., N, F)``; ``spec`` is complex and
    treated as a constant.
    """
    mask = as_tensor(mask)
    if mask.shape != spec.shape:
        raise ValueError(f"mask {mask.shape} and spectrogram {spec.shape} differ")
    w = config.window_samples
    out = istft_array(mask.data * spec, config, length).astype(mask.dtype, copy=False)
    # irfft weights: DC and Nyquist bins count once, the rest twice
    weight = np.full(spec.shape[-1], 2.0 / w)
    weight[0] = weight[-1] = 1.0 / w

    def backward(g):
        frames = istft_adjoint(g, config, spec.shape[-2])
        return (np.real(spec * np.conj(np.fft.rfft(frames, axis=-1))) * weight,)

    return _result(out, (mask,), backward)
