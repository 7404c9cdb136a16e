"""Dataset containers and file loaders (CSV, IDX, UCI Credit Approval)."""

from __future__ import annotations

import csv
import gzip
import importlib.util
import io
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import DataFormatError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

DATA_DIR_ENV = "FEDLAP_DATA_DIR"


@dataclass
class Dataset:
    train_inputs: np.ndarray
    train_labels: np.ndarray
    test_inputs: np.ndarray
    test_labels: np.ndarray
    class_count: int
    feature_mean: np.ndarray | None = None
    feature_std: np.ndarray | None = None
    name: str = ""
    feature_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        for arr in (self.train_inputs, self.test_inputs):
            if not np.all(np.isfinite(arr)):
                raise DataFormatError(f"{self.name or 'dataset'} has non-finite features")
        for lab in (self.train_labels, self.test_labels):
            if lab.size and (lab.min() < 0 or lab.max() >= self.class_count):
                raise DataFormatError(f"labels outside [0, {self.class_count})")

    @property
    def input_dim(self) -> int:
        return self.train_inputs.shape[1]


def standardize(X: np.ndarray, mean: np.ndarray | None = None,
                std: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Z-score columns; constant columns keep unit scale."""
    X = np.asarray(X, dtype=np.float64)
    if mean is None:
        mean = X.mean(axis=0)
    if std is None:
        std = X.std(axis=0)
        std = np.where(std > 0, std, 1.0)
    return (X - mean) / std, mean, std


def stratified_holdout(labels: np.ndarray, test_fraction: float,
                       rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Split indices into (train, test), holding out the same fraction of every class."""
    train, test = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_test = int(round(test_fraction * len(idx)))
        test.append(idx[:n_test])
        train.append(idx[n_test:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


@dataclass(frozen=True)
class CsvSchema:
    """How to turn a delimited text file into a labelled design matrix.

    Columns are addressed by position.  ``label_values`` fixes the class order
    (value -> class index = position in the tuple); when empty, sorted unique
    label strings are used.
    """

    label_column: int
    categorical_columns: tuple[int, ...] = ()
    ignore_columns: tuple[int, ...] = ()
    label_values: tuple[str, ...] = ()
    missing_token: str = "?"
    header: bool = False
    test_fraction: float = 0.2
    seed: int = 0


def load_csv(path, schema: CsvSchema, name: str = "") -> Dataset:
    """Parse, drop rows with missing values, one-hot categoricals, z-score numerics."""
    if isinstance(path, (str, os.PathLike)):
        with open(path, newline="") as fh:
            text = fh.read()
    else:
        text = path.read()
    return _parse_csv_text(text, schema, name or str(path))


def _parse_csv_text(text: str, schema: CsvSchema, name: str) -> Dataset:
    reader = csv.reader(io.StringIO(text))
    rows, width = [], None
    header_names = None
    for lineno, row in enumerate(reader, start=1):
        if not row or all(not cell.strip() for cell in row):
            continue
        row = [cell.strip() for cell in row]
        if schema.header and header_names is None:
            header_names = row
            width = len(row)
            continue
        if width is None:
            width = len(row)
        if len(row) != width:
            raise DataFormatError(f"{name}: line {lineno} has {len(row)} fields, expected {width}")
        rows.append((lineno, row))
    if width is None or schema.label_column >= width:
        raise DataFormatError(f"{name}: no usable rows")

    complete = [(ln, r) for ln, r in rows if schema.missing_token not in r]
    if not complete:
        raise DataFormatError(f"{name}: empty dataset after dropping rows with missing values")

    label_strings = [r[schema.label_column] for _, r in complete]
    classes = list(schema.label_values) or sorted(set(label_strings))
    index_of = {v: i for i, v in enumerate(classes)}
    try:
        labels = np.array([index_of[v] for v in label_strings], dtype=np.int64)
    except KeyError as exc:
        raise DataFormatError(f"{name}: unexpected label value {exc.args[0]!r}") from None

    skip = set(schema.ignore_columns) | {schema.label_column}
    cat_cols = [c for c in range(width) if c in schema.categorical_columns and c not in skip]
    num_cols = [c for c in range(width) if c not in schema.categorical_columns and c not in skip]
    colname = (lambda c: header_names[c]) if header_names else (lambda c: f"A{c + 1}")

    numeric = np.empty((len(complete), len(num_cols)))
    for i, (ln, r) in enumerate(complete):
        for j, c in enumerate(num_cols):
            try:
                numeric[i, j] = float(r[c])
            except ValueError:
                raise DataFormatError(f"{name}: line {ln} column {c + 1}: {r[c]!r} is not a number") from None

    blocks, names = [], []
    for c in cat_cols:
        values = sorted({r[c] for _, r in complete})
        col = np.array([r[c] for _, r in complete])
        blocks.append((col[:, None] == np.array(values)[None, :]).astype(np.float64))
        names.extend(f"{colname(c)}={v}" for v in values)

    rng = np.random.default_rng(schema.seed)
    if schema.test_fraction > 0:
        train_idx, test_idx = stratified_holdout(labels, schema.test_fraction, rng)
    else:
        train_idx, test_idx = np.arange(len(labels)), np.array([], dtype=np.int64)

    num_train, mean, std = standardize(numeric[train_idx])
    num_test = standardize(numeric[test_idx], mean, std)[0]
    cat = np.hstack(blocks) if blocks else np.zeros((len(labels), 0))
    X_train = np.hstack([num_train, cat[train_idx]])
    X_test = np.hstack([num_test, cat[test_idx]])
    return Dataset(X_train, labels[train_idx], X_test, labels[test_idx], len(classes),
                   feature_mean=mean, feature_std=std, name=name,
                   feature_names=[colname(c) for c in num_cols] + names)


# --- IDX (MNIST / Fashion-MNIST) ---------------------------------------------

def _open_maybe_gz(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path, expected_magic: int) -> np.ndarray:
    with _open_maybe_gz(path) as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise DataFormatError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise DataFormatError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise DataFormatError(f"{path}: truncated IDX payload ({len(raw) - header} of {count} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx_arrays(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    images = read_idx(images_path, IDX_IMAGE_MAGIC)
    labels = read_idx(labels_path, IDX_LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return X, labels.astype(np.int64)


def load_idx(images_path, labels_path, test_images_path=None, test_labels_path=None,
             class_count: int = 10, name: str = "") -> Dataset:
    """IDX image/label pair(s) as a Dataset with pixels scaled to [0, 1]."""
    X, y = load_idx_arrays(images_path, labels_path)
    if test_images_path is not None:
        Xt, yt = load_idx_arrays(test_images_path, test_labels_path)
    else:
        Xt, yt = np.zeros((0, X.shape[1])), np.zeros(0, dtype=np.int64)
    return Dataset(X, y, Xt, yt, class_count, name=name or str(images_path))


def find_idx_files(directory, prefix: str = "") -> dict[str, Path]:
    """Locate the four standard MNIST-layout files (optionally gzipped) in a directory."""
    directory = Path(directory)
    stems = {"train_images": "train-images-idx3-ubyte", "train_labels": "train-labels-idx1-ubyte",
             "test_images": "t10k-images-idx3-ubyte", "test_labels": "t10k-labels-idx1-ubyte"}
    found = {}
    for key, stem in stems.items():
        for cand in (directory / f"{prefix}{stem}", directory / f"{prefix}{stem}.gz"):
            if cand.exists():
                found[key] = cand
                break
        else:
            raise FileNotFoundError(f"missing {stem} in {directory}")
    return found


# --- UCI Credit Approval ------------------------------------------------------

# crx.data: 15 attributes then the class (+/-); these columns are nominal
CRX_SCHEMA = CsvSchema(label_column=15, categorical_columns=(0, 3, 4, 5, 6, 8, 9, 11, 12),
                       label_values=("-", "+"))
# integer digits assumed for the decimal attributes A2, A3, A8 when restoring the point
_CRX_DECIMAL_DIGITS = {1: 2, 2: 1, 7: 1}


def _restore_decimal(token: str, integer_digits: int) -> str:
    """Reinsert a dropped decimal point so the value keeps ``integer_digits`` digits before it."""
    digits = token.split(".")[0].lstrip("0")
    if not digits:
        return "0.0"
    shift = max(len(digits) - integer_digits, 0)
    return repr(int(digits) / 10 ** shift)


def _keel_crx_text() -> str | None:
    spec = importlib.util.find_spec("keel_ds")
    if spec is None or not spec.submodule_search_locations:
        return None
    path = Path(spec.submodule_search_locations[0]) / "data" / "balanced" / "raw" / "crx.dat"
    if not path.exists():
        return None
    lines = []
    for row in csv.reader(io.StringIO(path.read_text())):
        if not row:
            continue
        row = [c.strip() for c in row]
        for col, ndig in _CRX_DECIMAL_DIGITS.items():
            row[col] = _restore_decimal(row[col], ndig)
        row[-1] = {"positive": "+", "negative": "-"}.get(row[-1], row[-1])
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def uci_credit_source(path=None) -> tuple[str, str]:
    """Return (csv text, description) for UCI Credit Approval.

    Looks at an explicit path, then ``$FEDLAP_DATA_DIR/crx.data``, then the
    copy bundled with the ``keel-ds`` package.  The KEEL copy already has
    incomplete rows removed and lost its decimal points.  A2 always has two
    integer digits so it is restored exactly; A3 and A8 are assumed to have
    one, which is right for most rows but not all.
    """
    candidates = []
    if path is not None:
        candidates.append(Path(path))
    if os.environ.get(DATA_DIR_ENV):
        candidates.append(Path(os.environ[DATA_DIR_ENV]) / "crx.data")
    for cand in candidates:
        if cand.exists():
            return cand.read_text(), str(cand)
    if path is not None:
        raise FileNotFoundError(path)
    text = _keel_crx_text()
    if text is None:
        raise FileNotFoundError(
            f"UCI Credit data not found: pass a path, set {DATA_DIR_ENV}, or install keel-ds")
    return text, "keel-ds:crx.dat"


def load_uci_credit(path=None, test_fraction: float = 0.2, seed: int = 0) -> Dataset:
    text, origin = uci_credit_source(path)
    schema = CsvSchema(label_column=CRX_SCHEMA.label_column,
                       categorical_columns=CRX_SCHEMA.categorical_columns,
                       label_values=CRX_SCHEMA.label_values,
                       test_fraction=test_fraction, seed=seed)
    return _parse_csv_text(text, schema, f"uci-credit ({origin})")


def count_csv_rows(path, missing_token: str = "?") -> tuple[int, int]:
    """(raw rows, rows without missing values)."""
    total = complete = 0
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            total += 1
            if missing_token not in [c.strip() for c in row]:
                complete += 1
    return total, complete
