"""Dataset ingestion, caching, checkpoints, and augmentation assembly.

Real corpora come in as 16-bit PCM mono WAV files listed in a CSV manifest;
a deterministic synthetic four-class corpus stands in at desk scale.
Spectrograms persist in a small binary cache format ("SERC"), model weights
in a named-tensor checkpoint container, both little-endian and bit-stable
across hosts. Multi-version augmentation always splits by utterance id
before expanding versions, so a test utterance can never leak into training
under any preprocessing setting.
"""

from __future__ import annotations

import csv
import json
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .dsp import AudioSignal, LogMelSpectrogram, VERSION_TABLE, preprocess_version
from .errors import InvalidConfigError, InvalidInputError, SerForgeError
from .model import Model, ModelConfig, build_model

LABELS = ("angry", "sadness", "happiness", "neutral")
LABEL_IDS = {name: i for i, name in enumerate(LABELS)}
LABEL_ALIASES = {"excited": "happiness"}

CACHE_MAGIC = b"SERC"
CACHE_FORMAT_VERSION = 1
CHECKPOINT_MAGIC = b"SERF"
CHECKPOINT_FORMAT_VERSION = 1
UNLABELED = 255  # u8 sentinel for spectrograms without a label

SYNTH_SAMPLE_RATE = 16_000
SYNTH_DURATION_RANGE = (3.0, 6.0)
SYNTH_AMPLITUDE_RANGE = (0.4, 0.7)
# One row per class: fundamental band, AM-rate band, AM depth, noise floor,
# second-harmonic gain, tone gain. Class 3 is broadband noise-dominant.
SYNTH_CLASS_PARAMS = (
    {"f0": (120.0, 180.0), "am": (1.5, 3.0), "depth": 0.9, "noise": 0.01,
     "harmonic": 0.35, "tone_gain": 1.0},
    {"f0": (320.0, 420.0), "am": (5.0, 8.0), "depth": 0.6, "noise": 0.03,
     "harmonic": 0.25, "tone_gain": 1.0},
    {"f0": (750.0, 950.0), "am": (11.0, 16.0), "depth": 0.35, "noise": 0.08,
     "harmonic": 0.15, "tone_gain": 1.0},
    {"f0": (2200.0, 3200.0), "am": (0.5, 1.2), "depth": 0.2, "noise": 0.35,
     "harmonic": 0.0, "tone_gain": 0.15},
)


class WavFormatError(SerForgeError, ValueError):
    """The file is not a readable RIFF/WAVE container."""


class NonPcmError(WavFormatError):
    """The WAV uses a codec other than linear PCM."""


class UnsupportedChannelCountError(WavFormatError):
    """Only mono audio is supported."""


class TruncatedWavError(WavFormatError):
    """A chunk claims more bytes than the file holds."""


class ManifestError(SerForgeError, ValueError):
    """The manifest CSV is malformed."""


class CacheError(SerForgeError, ValueError):
    """A spectrogram cache file is unreadable."""


class BadMagicError(CacheError):
    pass


class CacheVersionError(CacheError):
    pass


class TruncatedCacheError(CacheError):
    pass


class CheckpointError(SerForgeError, ValueError):
    """A checkpoint file is unreadable."""


class IncompatibleCheckpointError(CheckpointError):
    """The checkpoint was written for a different model configuration."""


class AssemblyError(SerForgeError, RuntimeError):
    """Train/test utterance sets overlap; refusing to build a leaky dataset."""


def read_wav(path) -> AudioSignal:
    """Parse a 16-bit PCM mono RIFF/WAVE file; samples scale to [-1, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    offset = 12
    while offset + 8 <= len(blob):
        chunk_id = blob[offset:offset + 4]
        (chunk_size,) = struct.unpack_from("<I", blob, offset + 4)
        body_start = offset + 8
        if body_start + chunk_size > len(blob):
            raise TruncatedWavError(
                f"{path}: chunk {chunk_id!r} claims {chunk_size} bytes past end of file"
            )
        body = blob[body_start:body_start + chunk_size]
        if chunk_id == b"fmt ":
            if chunk_size < 16:
                raise TruncatedWavError(f"{path}: fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            data = body
        offset = body_start + chunk_size + (chunk_size & 1)

    if fmt is None:
        raise WavFormatError(f"{path}: missing fmt chunk")
    if data is None:
        raise TruncatedWavError(f"{path}: missing data chunk")
    audio_format, channels, sample_rate, _, _, bits = fmt
    if audio_format != 1:
        raise NonPcmError(f"{path}: codec {audio_format} is not linear PCM")
    if channels != 1:
        raise UnsupportedChannelCountError(f"{path}: {channels} channels, need mono")
    if bits != 16:
        raise WavFormatError(f"{path}: {bits}-bit samples, need 16-bit")
    samples = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    return AudioSignal(samples=samples, sample_rate=int(sample_rate))


@dataclass(frozen=True)
class ManifestEntry:
    utterance_id: str
    wav_path: str
    label: str  # canonical: one of LABELS
    split_tag: str = ""

    @property
    def label_id(self) -> int:
        return LABEL_IDS[self.label]


def load_manifest(path) -> list:
    """Read a manifest CSV (utterance_id, wav_path, label[, split_tag]).

    Labels are lowercased and "excited" folds into "happiness"; duplicate ids
    and unknown labels fail with the offending row number.
    """
    entries = []
    seen = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"utterance_id", "wav_path", "label"}
        header = set(reader.fieldnames or ())
        if not required <= header:
            raise ManifestError(f"{path}: header must contain {sorted(required)}")
        for row_num, row in enumerate(reader, start=2):
            utt = (row["utterance_id"] or "").strip()
            label = (row["label"] or "").strip().lower()
            label = LABEL_ALIASES.get(label, label)
            if label not in LABEL_IDS:
                raise ManifestError(f"{path} row {row_num}: unknown label {row['label']!r}")
            if not utt:
                raise ManifestError(f"{path} row {row_num}: empty utterance_id")
            if utt in seen:
                raise ManifestError(f"{path} row {row_num}: duplicate utterance_id {utt!r}")
            seen.add(utt)
            entries.append(ManifestEntry(
                utterance_id=utt,
                wav_path=(row["wav_path"] or "").strip(),
                label=label,
                split_tag=(row.get("split_tag") or "").strip(),
            ))
    return entries


def synth_dataset(n_per_class: int, seed: int) -> list:
    """Deterministic four-class synthetic corpus of (AudioSignal, label).

    Each class couples a fundamental-frequency band with an amplitude
    modulation rate and a noise floor; duration, pitch, amplitude, and phases
    jitter per utterance under the seed.
    """
    if n_per_class < 1:
        raise InvalidInputError(f"n_per_class must be >= 1, got {n_per_class}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    sr = SYNTH_SAMPLE_RATE
    out = []
    for label, params in enumerate(SYNTH_CLASS_PARAMS):
        for _ in range(n_per_class):
            duration = rng.uniform(*SYNTH_DURATION_RANGE)
            n = int(round(duration * sr))
            t = np.arange(n) / sr
            f0 = rng.uniform(*params["f0"])
            am_rate = rng.uniform(*params["am"])
            amplitude = rng.uniform(*SYNTH_AMPLITUDE_RANGE)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            am_phase = rng.uniform(0.0, 2.0 * np.pi)
            noise = rng.standard_normal(n)

            tone = np.sin(2.0 * np.pi * f0 * t + phase)
            tone += params["harmonic"] * np.sin(4.0 * np.pi * f0 * t + 2.0 * phase)
            envelope = 1.0 - params["depth"] * 0.5 * (1.0 + np.sin(2.0 * np.pi * am_rate * t + am_phase))
            samples = amplitude * envelope * params["tone_gain"] * tone
            samples += params["noise"] * noise
            np.clip(samples, -1.0, 1.0, out=samples)
            out.append((AudioSignal(samples=samples, sample_rate=sr), label))
    return out


def _atomic_write(path, payload: bytes):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def cache_filename(utterance_id: str, version_id: int) -> str:
    return f"{utterance_id}.v{version_id}.serc"


def write_cache(spec: LogMelSpectrogram, path):
    """Serialize one spectrogram; byte-identical across hosts, atomic write."""
    if spec.version_id not in VERSION_TABLE:
        raise InvalidConfigError(
            f"cache files need a dataset version in 1..8, got {spec.version_id}"
        )
    label = spec.label if spec.label >= 0 else UNLABELED
    if not 0 <= label <= 255:
        raise InvalidInputError(f"label {spec.label} does not fit the u8 field")
    data = np.ascontiguousarray(spec.data, dtype="<f4")
    t_len, m_len = data.shape
    utt = spec.utterance_id.encode("utf-8")
    header = CACHE_MAGIC
    header += struct.pack("<I", CACHE_FORMAT_VERSION)
    header += struct.pack("<B", spec.version_id)
    header += struct.pack("<II", t_len, m_len)
    header += struct.pack("<B", label)
    header += struct.pack("<H", len(utt)) + utt
    _atomic_write(path, header + data.tobytes())


def read_cache(path) -> LogMelSpectrogram:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != CACHE_MAGIC:
        raise BadMagicError(f"{path}: bad magic")
    if len(blob) < 20:
        raise TruncatedCacheError(f"{path}: header truncated")
    (fmt_version,) = struct.unpack_from("<I", blob, 4)
    if fmt_version != CACHE_FORMAT_VERSION:
        raise CacheVersionError(f"{path}: format version {fmt_version} unsupported")
    (dataset_version,) = struct.unpack_from("<B", blob, 8)
    t_len, m_len = struct.unpack_from("<II", blob, 9)
    (label,) = struct.unpack_from("<B", blob, 17)
    (id_len,) = struct.unpack_from("<H", blob, 18)
    header_end = 20 + id_len
    payload_len = 4 * t_len * m_len
    if len(blob) != header_end + payload_len:
        raise TruncatedCacheError(
            f"{path}: expected {header_end + payload_len} bytes, found {len(blob)}"
        )
    if dataset_version not in VERSION_TABLE:
        raise CacheError(f"{path}: dataset version {dataset_version} outside 1..8")
    utt = blob[20:header_end].decode("utf-8")
    data = np.frombuffer(blob[header_end:], dtype="<f4").reshape(t_len, m_len)
    return LogMelSpectrogram(
        data=data,
        version_id=dataset_version,
        utterance_id=utt,
        label=-1 if label == UNLABELED else int(label),
    )


def _config_to_json(cfg: ModelConfig) -> dict:
    return {
        "scale_n": cfg.scale_n,
        "eca_placement": [list(pair) for pair in cfg.eca_placement],
        "num_classes": cfg.num_classes,
        "input_shape": list(cfg.input_shape),
    }


def _config_from_json(blob: dict) -> ModelConfig:
    return ModelConfig(
        scale_n=blob["scale_n"],
        eca_placement=tuple(tuple(pair) for pair in blob["eca_placement"]),
        num_classes=blob["num_classes"],
        input_shape=tuple(blob["input_shape"]),
    )


def save_checkpoint(model: Model, path):
    """Write every parameter and batchnorm stat as named float32 tensors."""
    header = json.dumps(
        {"model_config": _config_to_json(model.config)},
        sort_keys=True,
    ).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_FORMAT_VERSION),
             struct.pack("<I", len(header)), header]
    tensors = [(name, t.data) for name, t in model.parameters()]
    tensors += [(name, arr) for name, arr in model.buffers()]
    parts.append(struct.pack("<I", len(tensors)))
    for name, array in tensors:
        encoded = name.encode("utf-8")
        arr = np.ascontiguousarray(array, dtype="<f4")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    _atomic_write(path, b"".join(parts))


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> Model:
    """Rebuild a float32 model whose eval-mode forward is bit-identical."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (fmt_version,) = struct.unpack_from("<I", blob, 4)
    if fmt_version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {fmt_version} unsupported")
    (header_len,) = struct.unpack_from("<I", blob, 8)
    try:
        header = json.loads(blob[12:12 + header_len].decode("utf-8"))
        config = _config_from_json(header["model_config"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from exc
    if expected_config is not None and config != expected_config:
        raise IncompatibleCheckpointError(
            f"{path}: checkpoint built for {config}, expected {expected_config}"
        )

    offset = 12 + header_len
    (n_tensors,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    arrays = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(blob, dtype="<f4", count=count,
                                     offset=offset).reshape(shape).copy()
        offset += 4 * count
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")

    model = build_model(config, rng_seed=0, dtype=np.float32)
    expected_names = [name for name, _ in model.parameters()]
    expected_names += [name for name, _ in model.buffers()]
    if set(expected_names) != set(arrays):
        raise CheckpointError(f"{path}: tensor names do not match the configuration")
    for name, tensor in model.parameters():
        if tensor.shape != arrays[name].shape:
            raise CheckpointError(f"{path}: tensor {name} has shape {arrays[name].shape}")
        tensor.data = arrays[name]
    for i, block in enumerate(model.blocks, start=1):
        block.state.running_mean = arrays[f"bn{i}.running_mean"]
        block.state.running_var = arrays[f"bn{i}.running_var"]
    return model


@dataclass(frozen=True, eq=False)
class AugmentedDataset:
    """Train/test spectrogram entries for one fold and version selection."""

    test_version: int
    train_versions: tuple  # included versions, base copy first
    train_entries: list    # (utterance_id, version, spectrogram, label)
    test_entries: list

    def train_items(self):
        return [(spec, label) for _, _, spec, label in self.train_entries]

    def test_items(self):
        return [(spec, label) for _, _, spec, label in self.test_entries]


def assemble_augmented(entries, provider, folds, fold_index: int, test_version: int,
                       train_versions=(), include_test_version_in_train: bool = True
                       ) -> AugmentedDataset:
    """Expand one fold into (utterance, version) training samples.

    The test fold is preprocessed at `test_version` only. The training fold
    gets the base `test_version` copy (switchable) plus every version in
    `train_versions`, in the given order. Utterance ids never cross the
    split, whatever the version axis does.
    """
    if test_version not in VERSION_TABLE:
        raise InvalidConfigError(f"test_version must be in 1..8, got {test_version}")
    for v in train_versions:
        if v not in VERSION_TABLE:
            raise InvalidConfigError(f"train version {v} outside 1..8")
        if v == test_version:
            raise InvalidConfigError(
                f"version {v} is already the base test version; drop it from train_versions"
            )
    if len(set(train_versions)) != len(tuple(train_versions)):
        raise InvalidConfigError(f"duplicate entries in train_versions {train_versions}")
    if not 0 <= fold_index < len(folds):
        raise InvalidConfigError(f"fold_index {fold_index} outside 0..{len(folds) - 1}")

    train_ids, test_ids = folds[fold_index]
    overlap = set(train_ids) & set(test_ids)
    if overlap:
        raise AssemblyError(f"utterances in both splits: {sorted(overlap)[:5]}")

    labels = dict(entries)
    included = ((test_version,) if include_test_version_in_train else ()) + tuple(train_versions)
    train_entries = [
        (utt, version, provider(utt, version), labels[utt])
        for version in included
        for utt in train_ids
    ]
    test_entries = [
        (utt, test_version, provider(utt, test_version), labels[utt])
        for utt in test_ids
    ]
    return AugmentedDataset(
        test_version=test_version,
        train_versions=included,
        train_entries=train_entries,
        test_entries=test_entries,
    )


def augmentation_preset(name: str):
    """(test_version, train_versions) for the two sweep orders."""
    if name == "ascending":
        return 1, tuple(range(2, 9))
    if name == "descending":
        return 8, tuple(range(7, 0, -1))
    raise InvalidConfigError(f"unknown augmentation preset {name!r}")


class Corpus:
    """Labeled utterances plus a (utterance, version) spectrogram provider."""

    def __init__(self, entries, test_version: int = 8, train_versions=(),
                 include_test_version_in_train: bool = True):
        self.entries = list(entries)
        self.test_version = test_version
        self.train_versions = tuple(train_versions)
        self.include_test_version_in_train = include_test_version_in_train

    def spectrogram(self, utterance_id: str, version_id: int) -> np.ndarray:
        raise NotImplementedError

    def assemble(self, folds, fold_index: int) -> AugmentedDataset:
        return assemble_augmented(
            self.entries, self.spectrogram, folds, fold_index,
            self.test_version, self.train_versions,
            self.include_test_version_in_train,
        )

    def fold_items(self, folds, fold_index: int):
        dataset = self.assemble(folds, fold_index)
        return dataset.train_items(), dataset.test_items()


class SynthCorpus(Corpus):
    """The synthetic corpus with in-memory spectrogram caching."""

    def __init__(self, n_per_class: int, seed: int, test_version: int = 8,
                 train_versions=(), include_test_version_in_train: bool = True):
        signals = synth_dataset(n_per_class, seed)
        entries = []
        self._signals = {}
        counters = {}
        for signal, label in signals:
            index = counters.get(label, 0)
            counters[label] = index + 1
            utt = f"synth-{label}-{index:03d}"
            entries.append((utt, label))
            self._signals[utt] = (signal, label)
        super().__init__(entries, test_version, train_versions,
                         include_test_version_in_train)
        self.n_per_class = n_per_class
        self.seed = seed
        self._spec_cache = {}

    def spectrogram(self, utterance_id: str, version_id: int) -> np.ndarray:
        key = (utterance_id, version_id)
        if key not in self._spec_cache:
            signal, label = self._signals[utterance_id]
            spec = preprocess_version(signal, version_id,
                                      utterance_id=utterance_id, label=label)
            self._spec_cache[key] = spec.data
        return self._spec_cache[key]


class ManifestCorpus(Corpus):
    """A manifest-backed corpus reading spectrograms from SERC cache files."""

    def __init__(self, manifest_entries, cache_dir, test_version: int = 8,
                 train_versions=(), include_test_version_in_train: bool = True):
        entries = [(e.utterance_id, e.label_id) for e in manifest_entries]
        super().__init__(entries, test_version, train_versions,
                         include_test_version_in_train)
        self.cache_dir = cache_dir

    def spectrogram(self, utterance_id: str, version_id: int) -> np.ndarray:
        path = os.path.join(self.cache_dir, cache_filename(utterance_id, version_id))
        if not os.path.exists(path):
            raise InvalidInputError(
                f"missing spectrogram cache {path}; run the preprocess command first"
            )
        spec = read_cache(path)
        if spec.utterance_id != utterance_id:
            raise CacheError(f"{path}: contains utterance {spec.utterance_id!r}")
        return spec.data
