"""Feature extraction, encoder stubs and the synthetic dataset.

Audio goes waveform -> MFCC -> center-crop/pad to ``q`` frames -> ``s``
equal chunks. Video goes clip -> ``s`` equal-duration segments -> ``T``
consecutive frames each (random start + flip/crop augmentation in train
mode, centered and deterministic in eval mode). Two small convolutional
stubs map the per-snippet media to ``s x C1`` feature matrices with
gradients flowing into their parameters.

MFCC framing is pinned here so results are reproducible without any
external audio library: n_fft 2048, hop 512, periodic Hann window,
center zero-padding (frame count ``1 + len // hop``), 128 triangular
mel filters on the HTK mel scale ``2595 * log10(1 + f/700)``, dB log
with power floor 1e-10, orthonormal DCT-II.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from scipy.fft import dct

from . import tensor as T
from .checkpoint import load_arrays, save_arrays
from .errors import ConfigError, ContractError, DimensionError, InputError
from .layers import Linear, collect_parameters, glorot_uniform
from .tensor import Tensor

EMOTION_NAMES = ("Excitation", "Fear", "Neutral", "Relaxation", "Sadness", "Tension")


# ---------------------------------------------------------------------------
# MFCC
# ---------------------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filter_centers(n_mels, sample_rate, fmin=0.0, fmax=None):
    """Center frequency (Hz) of each triangular mel filter."""
    fmax = sample_rate / 2.0 if fmax is None else fmax
    pts = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    return pts[1:-1]


def mel_filterbank(n_mels, n_fft, sample_rate, fmin=0.0, fmax=None):
    fmax = sample_rate / 2.0 if fmax is None else fmax
    pts = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    bank = np.zeros((n_mels, freqs.size))
    for i in range(n_mels):
        lo, mid, hi = pts[i], pts[i + 1], pts[i + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        bank[i] = np.maximum(0.0, np.minimum(up, down))
    return bank


def mfcc(samples, sample_rate, n_coeffs=32, n_fft=2048, hop=512, n_mels=128, floor=1e-10):
    """Mel-frequency cepstral coefficients, shape (frames, n_coeffs)."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise InputError("mfcc expects a nonempty mono waveform")
    if x.size < n_fft:
        raise InputError(f"waveform shorter than one frame ({x.size} < {n_fft})")
    pad = n_fft // 2
    padded = np.concatenate([np.zeros(pad), x, np.zeros(pad)])
    n_frames = 1 + x.size // hop
    window = 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n_fft) / n_fft))
    starts = np.arange(n_frames) * hop
    frames = np.lib.stride_tricks.sliding_window_view(padded, n_fft)[starts]
    spec = np.abs(np.fft.rfft(frames * window, axis=1)) ** 2
    mel = spec @ mel_filterbank(n_mels, n_fft, sample_rate).T
    logmel = 10.0 * np.log10(np.maximum(mel, floor))
    return dct(logmel, type=2, norm="ortho", axis=1)[:, :n_coeffs]


def mel_spectrum(samples, sample_rate, n_fft=2048, hop=512, n_mels=128, floor=1e-10):
    """Log-mel energies before the DCT; used by the tone-location oracle."""
    x = np.asarray(samples, dtype=np.float64)
    if x.size < n_fft:
        raise InputError(f"waveform shorter than one frame ({x.size} < {n_fft})")
    pad = n_fft // 2
    padded = np.concatenate([np.zeros(pad), x, np.zeros(pad)])
    n_frames = 1 + x.size // hop
    window = 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n_fft) / n_fft))
    starts = np.arange(n_frames) * hop
    frames = np.lib.stride_tricks.sliding_window_view(padded, n_fft)[starts]
    spec = np.abs(np.fft.rfft(frames * window, axis=1)) ** 2
    mel = spec @ mel_filterbank(n_mels, n_fft, sample_rate).T
    return 10.0 * np.log10(np.maximum(mel, floor))


def chunk_audio(m, q, s):
    """Center-crop/zero-pad the frame axis to ``q`` frames, then split into ``s`` chunks.

    Concatenating the chunks reconstructs the cropped array exactly.
    """
    if q <= 0:
        raise ConfigError(f"audio crop length q must be positive, got {q}")
    if q % s != 0:
        raise ConfigError(f"q={q} not divisible by s={s}")
    m = np.asarray(m)
    n = m.shape[0]
    if n >= q:
        start = (n - q) // 2
        cropped = m[start : start + q]
    else:
        front = (q - n) // 2
        back = q - n - front
        cropped = np.concatenate(
            [np.zeros((front,) + m.shape[1:], dtype=m.dtype), m,
             np.zeros((back,) + m.shape[1:], dtype=m.dtype)])
    return list(np.split(cropped, s))


# ---------------------------------------------------------------------------
# video snippets
# ---------------------------------------------------------------------------

def sample_video_snippets(frames, s, t_frames, crop, train_mode, rng=None,
                          return_indices=False):
    """Split a clip into ``s`` segments and take ``T`` consecutive frames from each.

    Train mode picks a random start within each segment and applies one
    horizontal-flip/random-crop decision for the whole clip; eval mode
    is fully deterministic (centered starts, center crop, no flip).
    Clips shorter than ``s * T`` frames are loop-padded by tiling.
    """
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[0] == 0:
        raise InputError("empty or malformed video clip")
    t_total, h, w, _ = frames.shape
    if h < crop or w < crop:
        raise InputError(f"clip {h}x{w} smaller than crop {crop}")
    if train_mode and rng is None:
        raise ContractError("train-mode snippet sampling needs an rng")
    while frames.shape[0] < s * t_frames:
        frames = np.concatenate([frames, frames], axis=0)
    t_total = frames.shape[0]

    bounds = [(t_total * i) // s for i in range(s + 1)]
    if train_mode:
        flip = bool(rng.random() < 0.5)
        top = int(rng.integers(0, h - crop + 1))
        left = int(rng.integers(0, w - crop + 1))
    else:
        flip = False
        top = (h - crop) // 2
        left = (w - crop) // 2

    snippets, indices = [], []
    for i in range(s):
        seg_start, seg_end = bounds[i], bounds[i + 1]
        slack = (seg_end - seg_start) - t_frames
        if train_mode:
            start = seg_start + int(rng.integers(0, slack + 1))
        else:
            start = seg_start + slack // 2
        picked = frames[start : start + t_frames, top : top + crop, left : left + crop, :]
        if flip:
            picked = picked[:, :, ::-1, :]
        snippets.append(np.ascontiguousarray(picked))
        indices.append(list(range(start, start + t_frames)))
    if return_indices:
        return snippets, indices
    return snippets


def ContractErrorMissingRng():
    from .errors import ContractError

    return ContractError("train-mode snippet sampling needs an rng")


# ---------------------------------------------------------------------------
# differentiable encoder stubs
# ---------------------------------------------------------------------------

def _conv_indices(n_images, h, w, c, k, stride):
    """im2col index map into the flat (n, h, w, c) buffer; valid padding."""
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    if oh < 1 or ow < 1:
        raise DimensionError(f"conv input {h}x{w} too small for kernel {k}")
    ys = (np.arange(oh) * stride)[:, None] + np.arange(k)[None, :]   # oh x k
    xs = (np.arange(ow) * stride)[:, None] + np.arange(k)[None, :]   # ow x k
    # rows: (n, oh, ow); patch cols: (k, k, c)
    base = (np.arange(n_images)[:, None, None] * h * w * c)
    pos = (ys[None, :, None, :, None, None] * w * c
           + xs[None, None, :, None, :, None] * c
           + np.arange(c)[None, None, None, None, None, :])
    idx = (base[:, :, :, None, None, None] + pos).reshape(n_images * oh * ow, k * k * c)
    return idx, oh, ow


class _ConvStack:
    """Shared im2col + matmul machinery for the two encoder stubs."""

    def __init__(self, channels, k, stride, rng, dtype):
        self.k = k
        self.stride = stride
        self.weights = []
        self.biases = []
        for cin, cout in zip(channels[:-1], channels[1:]):
            w = glorot_uniform(rng, k * k * cin, cout, dtype=dtype)
            self.weights.append(Tensor(w, requires_grad=True))
            self.biases.append(Tensor(np.zeros(cout, dtype=dtype), requires_grad=True))
        self.channels = channels
        self._idx_cache = {}

    def _indices(self, n, h, w, c):
        key = (n, h, w, c)
        if key not in self._idx_cache:
            self._idx_cache[key] = _conv_indices(n, h, w, c, self.k, self.stride)
        return self._idx_cache[key]

    def __call__(self, x: Tensor, n, h, w):
        """x holds n images flattened as (n*h*w, c0) row features."""
        c = self.channels[0]
        for w_t, b_t, cout in zip(self.weights, self.biases, self.channels[1:]):
            idx, oh, ow = self._indices(n, h, w, c)
            patches = T.take_flat(x, idx)
            x = T.relu(T.add_bias(T.matmul(patches, w_t), b_t))
            h, w, c = oh, ow, cout
        return x, h, w

    def parameters(self):
        out = {}
        for i, (w_t, b_t) in enumerate(zip(self.weights, self.biases)):
            out[f"conv{i}.w"] = w_t
            out[f"conv{i}.b"] = b_t
        return out


def _block_mean_matrix(n_blocks, rows_per_block, dtype):
    m = np.zeros((n_blocks, n_blocks * rows_per_block), dtype=dtype)
    for i in range(n_blocks):
        m[i, i * rows_per_block : (i + 1) * rows_per_block] = 1.0 / rows_per_block
    return m


class VisualEncoder:
    """Two stride-2 conv layers, per-snippet global mean pool, linear to C1."""

    def __init__(self, c1, rng, dtype=np.float32):
        self.dtype = dtype
        self.convs = _ConvStack([3, 8, 16], k=3, stride=2, rng=rng, dtype=dtype)
        self.proj = Linear(16, c1, rng, dtype=dtype)

    def __call__(self, snippets) -> Tensor:
        s = len(snippets)
        t, h, w, c = snippets[0].shape
        flat = np.concatenate([sn.reshape(-1, c) for sn in snippets], axis=0)
        x = Tensor(flat, dtype=self.dtype)
        feat, oh, ow = self.convs(x, s * t, h, w)
        pool = T.constant(_block_mean_matrix(s, t * oh * ow, self.dtype), dtype=self.dtype)
        return self.proj(T.matmul(pool, feat))

    def parameters(self):
        return {"convs": self.convs, "proj": self.proj}


class AudioEncoder:
    """One stride-2 conv over the MFCC snippet, mean pool, linear to C1."""

    def __init__(self, c1, rng, dtype=np.float32):
        self.dtype = dtype
        self.convs = _ConvStack([1, 8], k=3, stride=2, rng=rng, dtype=dtype)
        self.proj = Linear(8, c1, rng, dtype=dtype)

    def __call__(self, chunks) -> Tensor:
        s = len(chunks)
        fr, nc = chunks[0].shape
        flat = np.concatenate([ch.reshape(-1, 1) for ch in chunks], axis=0)
        x = Tensor(flat, dtype=self.dtype)
        feat, oh, ow = self.convs(x, s, fr, nc)
        pool = T.constant(_block_mean_matrix(s, oh * ow, self.dtype), dtype=self.dtype)
        return self.proj(T.matmul(pool, feat))

    def parameters(self):
        return {"convs": self.convs, "proj": self.proj}


def encode(snippets, encoder) -> Tensor:
    return encoder(snippets)


# ---------------------------------------------------------------------------
# synthetic dataset
# ---------------------------------------------------------------------------

@dataclass
class SynthSpec:
    """Dimensions and signal strength of the generated desk-scale corpus."""

    t_total: int = 16
    height: int = 20
    width: int = 20
    sample_rate: int = 44100
    audio_len: int = 64 * 512
    num_classes: int = 6
    signal_strength: float = 1.0

    def to_dict(self):
        return {
            "t_total": self.t_total, "height": self.height, "width": self.width,
            "sample_rate": self.sample_rate, "audio_len": self.audio_len,
            "num_classes": self.num_classes, "signal_strength": self.signal_strength,
        }


def synth_sample(seed, label, index, spec: SynthSpec):
    """One (video, audio) pair; deterministic in (seed, label, index).

    Video: a class-specific block of a 2x3 grid is brightened on every
    frame, plus per-frame noise. Audio: a class-specific two-tone
    mixture plus noise. Both carry enough linear signal for a probe on
    mean features to separate the classes.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(label, index)))
    h, w = spec.height, spec.width
    row_edges = np.linspace(0, h, 3).astype(int)
    col_edges = np.linspace(0, w, 4).astype(int)
    r, c = divmod(label, 3)
    video = 0.45 + 0.05 * rng.standard_normal((spec.t_total, h, w, 3))
    bump = np.zeros((h, w, 1))
    bump[row_edges[r]:row_edges[r + 1], col_edges[c]:col_edges[c + 1], :] = 0.35
    video += spec.signal_strength * bump[None, :, :, :]
    video = np.clip(video, 0.0, 1.0).astype(np.float32)

    t = np.arange(spec.audio_len) / spec.sample_rate
    f0 = 220.0 * (label + 1)
    tone = 0.4 * np.sin(2 * np.pi * f0 * t) + 0.3 * np.sin(2 * np.pi * 1.5 * f0 * t)
    audio = spec.signal_strength * tone + 0.05 * rng.standard_normal(spec.audio_len)
    audio = np.clip(audio, -1.0, 1.0).astype(np.float32)
    return video, audio


def synth_dataset(n_per_class, num_classes=6, seed=0, spec: SynthSpec | None = None):
    """Class-conditional separable clips; byte-identical for a fixed seed."""
    if n_per_class <= 0:
        raise ConfigError(f"n_per_class must be positive, got {n_per_class}")
    spec = spec or SynthSpec()
    if num_classes != spec.num_classes:
        spec = SynthSpec(**{**spec.to_dict(), "num_classes": num_classes})
    samples = []
    for label in range(num_classes):
        for i in range(n_per_class):
            video, audio = synth_sample(seed, label, i, spec)
            samples.append({
                "id": f"sample_{label}_{i:04d}",
                "label": label,
                "video": video,
                "audio": audio,
            })
    return samples, spec


# ---------------------------------------------------------------------------
# dataset directory I/O
# ---------------------------------------------------------------------------

def write_dataset(out_dir, samples, spec: SynthSpec, meta_extra=None):
    media_dir = os.path.join(out_dir, "media")
    os.makedirs(media_dir, exist_ok=True)
    meta = {"synth_spec": spec.to_dict()}
    if meta_extra:
        meta.update(meta_extra)
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)
    with open(os.path.join(out_dir, "manifest.jsonl"), "w") as fh:
        for sample in samples:
            rel = f"media/{sample['id']}.bin"
            save_arrays(os.path.join(out_dir, rel),
                        {"video": sample["video"], "audio": sample["audio"]},
                        meta={"label": sample["label"], "id": sample["id"]})
            fh.write(json.dumps({"id": sample["id"], "media": rel,
                                 "label": sample["label"]}, sort_keys=True) + "\n")


def read_dataset(data_dir):
    manifest = os.path.join(data_dir, "manifest.jsonl")
    if not os.path.exists(manifest):
        raise InputError(f"no manifest.jsonl under {data_dir}")
    with open(os.path.join(data_dir, "meta.json")) as fh:
        meta = json.load(fh)
    spec = SynthSpec(**meta["synth_spec"])
    samples = []
    with open(manifest) as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"{manifest}:{line_no}: bad JSON ({exc})") from exc
            if "media" in entry:
                arrays, _ = load_arrays(os.path.join(data_dir, entry["media"]))
                video, audio = arrays["video"], arrays["audio"]
            elif "synth" in entry:
                srec = entry["synth"]
                video, audio = synth_sample(srec["seed"], entry["label"],
                                            srec["index"], spec)
            else:
                raise InputError(f"{manifest}:{line_no}: neither media nor synth entry")
            samples.append({"id": entry["id"], "label": int(entry["label"]),
                            "video": video, "audio": audio})
    if not samples:
        raise InputError(f"{manifest}: empty dataset")
    return samples, spec, meta
