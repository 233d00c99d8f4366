"""Caption ingestion: normalization, vocabulary with a frequency floor,
label mapping, batching, and a synthetic labeled corpus generator that stands
in for the non-redistributable clinical dataset at desk scale.
"""
from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

PAD_ID, OOV_ID, BOS_ID, EOS_ID = 0, 1, 2, 3
PAD_TOKEN, OOV_TOKEN, BOS_TOKEN, EOS_TOKEN = "<pad>", "oov", "<bos>", "<eos>"
RESERVED = (PAD_TOKEN, OOV_TOKEN, BOS_TOKEN, EOS_TOKEN)

DEFAULT_MAX_LEN = 30
DEFAULT_MIN_FREQ = 5

_PUNCT = re.compile(r"([.,:;])")


class CorpusFormatError(ValueError):
    """A dataset file violates the caption<TAB>label line format."""


def normalize_and_tokenize(raw, max_len=DEFAULT_MAX_LEN):
    """Lowercase, isolate . , : ; as standalone tokens, split on whitespace,
    and truncate to max_len tokens."""
    return _PUNCT.sub(r" \1 ", raw.lower()).split()[:max_len]


@dataclass
class Vocabulary:
    """Bidirectional token<->id map with fixed reserved ids 0..3."""

    tokens: list  # id -> token string, reserved first
    min_freq: int = DEFAULT_MIN_FREQ
    _ids: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        self._ids = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self._ids) != len(self.tokens):
            raise ValueError("duplicate token in vocabulary")

    def __len__(self):
        return len(self.tokens)

    def id_of(self, token):
        return self._ids.get(token, OOV_ID)

    def token_of(self, tid):
        return self.tokens[tid]

    def __contains__(self, token):
        return token in self._ids


def build_vocabulary(texts, min_freq=DEFAULT_MIN_FREQ):
    """Keep tokens of frequency >= min_freq; ids follow descending frequency,
    ties broken lexicographically, after the 4 reserved ids."""
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    counts = Counter()
    for tokens in texts:
        counts.update(tokens)
    kept = sorted(
        (tok for tok, c in counts.items() if c >= min_freq),
        key=lambda tok: (-counts[tok], tok),
    )
    return Vocabulary(list(RESERVED) + kept, min_freq=min_freq)


@dataclass(frozen=True)
class Caption:
    """Padded token-id sequence plus its original length. No BOS/EOS inside;
    the decoder path adds those."""

    ids: tuple
    length: int

    def content_ids(self):
        return self.ids[: self.length]


def encode_caption(vocab, tokens, max_len=DEFAULT_MAX_LEN):
    tokens = list(tokens)[:max_len]
    ids = [vocab.id_of(t) for t in tokens]
    length = len(ids)
    ids.extend([PAD_ID] * (max_len - length))
    return Caption(tuple(ids), length)


def decode_caption(vocab, caption):
    return [vocab.token_of(i) for i in caption.content_ids()]


def detokenize(tokens):
    return " ".join(tokens)


@dataclass
class LabeledCorpus:
    """Encoded captions with label ids, the vocabulary, and label names."""

    captions: list
    labels: list
    vocab: Vocabulary
    label_names: list
    max_len: int = DEFAULT_MAX_LEN

    def __len__(self):
        return len(self.captions)

    def __post_init__(self):
        nv, nl = len(self.vocab), len(self.label_names)
        for cap in self.captions:
            if any(i >= nv for i in cap.ids):
                raise ValueError("caption id outside vocabulary")
        if any(l < 0 or l >= nl for l in self.labels):
            raise ValueError("label id outside label set")

    def label_marginal(self):
        counts = np.bincount(self.labels, minlength=len(self.label_names))
        return (counts / counts.sum()).tolist()

    def split(self, test_fraction, seed):
        """Deterministic shuffle split into (train, test)."""
        order = np.random.default_rng(seed).permutation(len(self.captions))
        n_test = int(round(len(order) * test_fraction))
        test_idx, train_idx = order[:n_test], order[n_test:]
        mk = lambda idx: LabeledCorpus(
            [self.captions[i] for i in idx],
            [self.labels[i] for i in idx],
            self.vocab,
            self.label_names,
            self.max_len,
        )
        return mk(train_idx), mk(test_idx)


def load_dataset(path, max_len=DEFAULT_MAX_LEN, min_freq=DEFAULT_MIN_FREQ, label_names=None, vocab=None):
    """Read a UTF-8 file of caption<TAB>label lines into a LabeledCorpus.

    Labels map to ids in order of first appearance unless a fixed
    `label_names` list is supplied, in which case unknown labels are errors.
    A vocabulary is built from the file unless an existing one is passed
    (e.g. encoding a test split against a trained model's vocabulary).
    """
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise CorpusFormatError(f"{path}: line {lineno}: expected caption<TAB>label")
            text, label = line.split("\t", 1)
            label = label.strip()
            if not label:
                raise CorpusFormatError(f"{path}: line {lineno}: empty label")
            rows.append((normalize_and_tokenize(text, max_len), label, lineno))
    names = list(label_names) if label_names is not None else []
    ids = {name: i for i, name in enumerate(names)}
    labels = []
    for _, label, lineno in rows:
        if label not in ids:
            if label_names is not None:
                raise CorpusFormatError(f"{path}: line {lineno}: unknown label {label!r}")
            ids[label] = len(names)
            names.append(label)
        labels.append(ids[label])
    if vocab is None:
        vocab = build_vocabulary((tokens for tokens, _, _ in rows), min_freq)
    captions = [encode_caption(vocab, tokens, max_len) for tokens, _, _ in rows]
    return LabeledCorpus(captions, labels, vocab, names, max_len)


MESH_LABELS = ("normal", "cardiomegaly", "other")


def map_mesh_labels(mesh_terms):
    """Collapse a diagnosis-term list into the 3-way label id.

    Precedence: exactly {"normal"} -> normal; any term containing
    "cardiomegaly" -> cardiomegaly; everything else -> other.
    """
    terms = [t.strip().lower() for t in mesh_terms]
    if not terms:
        raise ValueError("empty diagnosis-term list")
    if set(terms) == {"normal"}:
        return MESH_LABELS.index("normal")
    if any("cardiomegaly" in t for t in terms):
        return MESH_LABELS.index("cardiomegaly")
    return MESH_LABELS.index("other")


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class GrammarSpec:
    """Label -> caption templates with {slot} markers, shared slot fillers,
    and target label proportions."""

    templates: dict  # label name -> list of template strings
    slots: dict  # slot name -> list of filler strings
    proportions: dict  # label name -> target fraction

    def label_names(self):
        return list(self.templates)


def load_grammar(path):
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    return GrammarSpec(raw["templates"], raw["slots"], raw["proportions"])


def save_grammar(spec, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(
            {"templates": spec.templates, "slots": spec.slots, "proportions": spec.proportions},
            fh,
            indent=2,
        )


DEFAULT_GRAMMAR = GrammarSpec(
    templates={
        "normal": [
            "heart size within normal limits . no {finding} or {finding} .",
            "the lungs are clear . no acute {region} abnormality . heart size within normal limits .",
            "cardiomediastinal silhouette is normal . no {finding} . {bones} appear intact .",
            "no focal consolidation . heart size within normal limits . {bones} appear intact . no {finding} .",
            "clear lungs bilaterally . no {finding} . no acute disease . mediastinal contours are stable and unremarkable .",
            "heart and pulmonary {vessel} are normal . no {finding} is seen . no {finding} .",
            "normal heart size . the {region} spaces are clear . no {finding} or {finding} identified .",
            "no {finding} . no {finding} . cardiac contours within normal limits . the {bones} are intact .",
            "both lungs are well expanded and clear . heart size and mediastinal contours appear normal .",
            "no evidence of active disease . normal pulmonary {vessel} . the cardiac silhouette is unremarkable .",
        ],
        "cardiomegaly": [
            "the heart is {degree} enlarged . no {finding} .",
            "heart size is enlarged . {aorta} aorta . no {finding} or {finding} .",
            "{degree} cardiomegaly with {vessel} congestion . no {finding} is identified .",
            "stable cardiomegaly . no {finding} or {finding} . {bones} appear intact .",
            "enlarged cardiac silhouette . {aorta} aorta is again seen . no acute {region} abnormality .",
            "cardiomegaly is {degree} compared to prior . the lungs remain clear .",
            "persistent {degree} enlargement of the heart . no acute {region} findings . {aorta} aorta noted .",
            "the cardiac silhouette remains {degree} enlarged with {vessel} congestion . no {finding} .",
        ],
        "other": [
            "{finding} is present in the {side} {region} . heart size is normal .",
            "there is {degree} {finding} . no change from prior examination .",
            "{side} {finding} appears increased . {bones} are unremarkable .",
            "scattered {finding} noted . {degree} degenerative changes of the spine .",
            "small {side} {finding} . stable appearance of prior granulomatous disease .",
            "{degree} {finding} in the {side} {region} . clinical correlation recommended .",
            "interval increase in {side} {finding} . the heart is normal in size .",
            "{finding} with associated {finding} in the {side} {region} . findings appear {degree} worse .",
            "postsurgical changes of the chest . {degree} {finding} persists in the {side} {region} .",
        ],
    },
    slots={
        "finding": [
            "pleural effusion",
            "pneumothorax",
            "pulmonary edema",
            "airspace opacity",
            "atelectasis",
            "focal infiltrate",
            "granuloma",
            "airspace consolidation",
        ],
        "region": ["lung", "chest", "airspace", "lower lobe", "upper lobe", "lung base"],
        "side": ["right", "left", "bilateral"],
        "degree": ["mild", "moderate", "severe", "mildly", "slightly"],
        "aorta": ["tortuous", "calcified", "unfolded", "ectatic"],
        "vessel": ["vascularity", "vasculature"],
        "bones": ["osseous structures", "bony structures", "visualized ribs"],
    },
    proportions={"normal": 0.45, "cardiomegaly": 0.20, "other": 0.35},
)


def synthesize_corpus(spec=None, n=2000, seed=0, max_len=DEFAULT_MAX_LEN, min_freq=DEFAULT_MIN_FREQ):
    """Emit n labeled captions from the grammar, deterministically per seed.

    Label counts follow the target proportions exactly (largest remainder),
    then the order is shuffled.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    spec = spec or DEFAULT_GRAMMAR
    rng = np.random.default_rng(seed)
    names = spec.label_names()
    shares = np.array([spec.proportions[name] for name in names], dtype=np.float64)
    shares = shares / shares.sum()
    counts = np.floor(shares * n).astype(int)
    remainders = shares * n - counts
    for i in np.argsort(-remainders)[: n - counts.sum()]:
        counts[i] += 1
    rows = []
    for label_id, name in enumerate(names):
        templates = spec.templates[name]
        for _ in range(counts[label_id]):
            template = templates[rng.integers(len(templates))]
            text = re.sub(
                r"\{(\w+)\}",
                lambda m: spec.slots[m.group(1)][rng.integers(len(spec.slots[m.group(1)]))],
                template,
            )
            rows.append((normalize_and_tokenize(text, max_len), label_id))
    order = rng.permutation(len(rows))
    rows = [rows[i] for i in order]
    vocab = build_vocabulary((tokens for tokens, _ in rows), min_freq)
    captions = [encode_caption(vocab, tokens, max_len) for tokens, _ in rows]
    return LabeledCorpus(captions, [label for _, label in rows], vocab, names, max_len)


@dataclass
class Batch:
    ids: np.ndarray  # [batch x max_len] int
    lengths: np.ndarray  # [batch]
    labels: np.ndarray  # [batch]


def batch_iter(corpus, batch_size, seed):
    """Endless stream of fixed-size batches; each epoch is reshuffled with
    (seed + epoch index) and the ragged remainder is dropped."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(corpus) < batch_size:
        raise ValueError(f"corpus of {len(corpus)} smaller than batch size {batch_size}")
    ids = np.array([cap.ids for cap in corpus.captions], dtype=np.intp)
    lengths = np.array([cap.length for cap in corpus.captions], dtype=np.intp)
    labels = np.array(corpus.labels, dtype=np.intp)
    epoch = 0
    while True:
        order = np.random.default_rng(seed + epoch).permutation(len(corpus))
        for start in range(0, len(corpus) - batch_size + 1, batch_size):
            sel = order[start : start + batch_size]
            yield Batch(ids[sel], lengths[sel], labels[sel])
        epoch += 1


def epoch_batches(corpus, batch_size, seed, epoch=0):
    """The batches of a single epoch, in their shuffled order."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(corpus) < batch_size:
        raise ValueError(f"corpus of {len(corpus)} smaller than batch size {batch_size}")
    it = batch_iter(corpus, batch_size, seed + epoch)
    return [next(it) for _ in range(len(corpus) // batch_size)]
