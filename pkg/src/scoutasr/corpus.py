"""Synthetic utterances with exact word alignments.

Each word type owns a fixed random feature template.  An utterance is a
sequence of templates separated by short silences, plus Gaussian noise.
Feature 0 is an energy track that is 1 inside a word and fades to 0 over the
word's last frames, so word ends are visible without look-ahead.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .scout import alignment_boundaries, labels_from_alignment
from .transformer import subsampled_length

FADE = (0.6, 0.3, 0.0)


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    vocab_size: int = 10
    n_features: int = 16
    template_frames: tuple = (8, 16)
    noise_std: float = 0.1
    silence_frames: tuple = (0, 3)
    edge_silence_frames: tuple = (2, 6)
    words_per_utterance: tuple = (2, 5)
    n_train: int = 200
    n_test: int = 50
    seed: int = 0

    def __post_init__(self):
        for name in ("template_frames", "silence_frames", "edge_silence_frames", "words_per_utterance"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"{name} range {lo}..{hi} is empty or negative")
        if self.vocab_size < 1 or self.n_features < 2:
            raise ValueError("need at least one word and two feature dims")
        if self.template_frames[0] < len(FADE) + 1:
            raise ValueError(f"templates need at least {len(FADE) + 1} frames")
        if self.words_per_utterance[0] < 1:
            raise ValueError("utterances need at least one word")
        if self.noise_std < 0 or self.n_train < 0 or self.n_test < 0 or self.n_train + self.n_test == 0:
            raise ValueError("invalid noise level or corpus size")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticCorpusSpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})


@dataclass
class Utterance:
    uid: str
    features: np.ndarray = field(repr=False)
    tokens: list
    alignment: list
    split: str = "train"

    @property
    def n_frames(self) -> int:
        return subsampled_length(self.features.shape[0])

    def boundary_labels(self) -> np.ndarray:
        return labels_from_alignment(self.alignment, self.n_frames)

    def reference_boundaries(self) -> np.ndarray:
        return alignment_boundaries(self.alignment)


@dataclass
class Corpus:
    vocab: list
    utterances: list
    spec: SyntheticCorpusSpec | None = None

    def split(self, name: str) -> list:
        return [u for u in self.utterances if u.split == name]

    @property
    def train(self) -> list:
        return self.split("train")

    @property
    def test(self) -> list:
        return self.split("test")

    def words(self, tokens) -> list[str]:
        return [self.vocab[t] for t in tokens]


def word_templates(spec: SyntheticCorpusSpec, rng: np.random.Generator) -> list[np.ndarray]:
    lo, hi = spec.template_frames
    templates = []
    for _ in range(spec.vocab_size):
        length = int(rng.integers(lo, hi + 1))
        body = rng.normal(0.0, 1.0, size=(length, spec.n_features))
        energy = np.ones(length)
        energy[-len(FADE):] = FADE
        body[:, 0] = energy
        templates.append(body)
    return templates


def generate_corpus(spec: SyntheticCorpusSpec = SyntheticCorpusSpec()) -> Corpus:
    rng = np.random.default_rng(spec.seed)
    templates = word_templates(spec, rng)
    vocab = [f"w{i}" for i in range(spec.vocab_size)]
    utterances = []
    for n in range(spec.n_train + spec.n_test):
        n_words = int(rng.integers(spec.words_per_utterance[0], spec.words_per_utterance[1] + 1))
        tokens = [int(t) for t in rng.integers(0, spec.vocab_size, size=n_words)]
        pieces, alignment = [], []
        cursor = int(rng.integers(spec.edge_silence_frames[0], spec.edge_silence_frames[1] + 1))
        pieces.append(np.zeros((cursor, spec.n_features)))
        for k, tok in enumerate(tokens):
            if k:
                gap = int(rng.integers(spec.silence_frames[0], spec.silence_frames[1] + 1))
                pieces.append(np.zeros((gap, spec.n_features)))
                cursor += gap
            tpl = templates[tok]
            alignment.append({"word": vocab[tok], "start_ms": 10 * cursor, "end_ms": 10 * (cursor + len(tpl))})
            pieces.append(tpl)
            cursor += len(tpl)
        tail = int(rng.integers(spec.edge_silence_frames[0], spec.edge_silence_frames[1] + 1))
        pieces.append(np.zeros((tail, spec.n_features)))
        clean = np.concatenate(pieces)
        noisy = clean + rng.normal(0.0, spec.noise_std, size=clean.shape) if spec.noise_std > 0 else clean
        split = "train" if n < spec.n_train else "test"
        utterances.append(Utterance(f"utt{n:04d}", noisy, tokens, alignment, split))
    return Corpus(vocab, utterances, spec)


# ---------------------------------------------------------------------- disk


def save_corpus(corpus: Corpus, directory) -> Path:
    """Write ``corpus.json``, ``features.{json,bin}`` and one alignment file per utterance."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    io.write_tensors(root / "features", {u.uid: u.features for u in corpus.utterances}, dtype="f32")
    for u in corpus.utterances:
        io.write_alignment(root / "alignments" / f"{u.uid}.json", u.alignment)
    manifest = {
        "format_version": io.FORMAT_VERSION,
        "vocab": corpus.vocab,
        "spec": corpus.spec.to_dict() if corpus.spec else None,
        "utterances": [{"id": u.uid, "split": u.split, "transcript": " ".join(corpus.words(u.tokens))} for u in corpus.utterances],
    }
    path = root / "corpus.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_corpus(directory) -> Corpus:
    root = Path(directory)
    try:
        manifest = json.loads((root / "corpus.json").read_text())
    except FileNotFoundError as exc:
        raise io.FormatError(f"{root}: no corpus.json (run gen-data first)") from exc
    if manifest.get("format_version") != io.FORMAT_VERSION:
        raise io.FormatError(f"{root}/corpus.json: unsupported format_version {manifest.get('format_version')!r}")
    features, _ = io.read_tensors(root / "features")
    vocab = manifest["vocab"]
    index = {w: i for i, w in enumerate(vocab)}
    utterances = []
    for entry in manifest["utterances"]:
        tokens = [index[w] for w in entry["transcript"].split()]
        alignment = io.read_alignment(root / "alignments" / f"{entry['id']}.json")
        utterances.append(Utterance(entry["id"], features[entry["id"]].astype(np.float64), tokens, alignment, entry["split"]))
    spec = SyntheticCorpusSpec.from_dict(manifest["spec"]) if manifest.get("spec") else None
    return Corpus(vocab, utterances, spec)


def corpus_digest(directory) -> str:
    root = Path(directory)
    return io.file_digest(root / "corpus.json", *io.container_paths(root / "features"))
