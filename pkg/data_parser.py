"""Functions for obtaining the datasets embeddings are learned on.

Entry points are ``load_feature_csv``, ``gen_synthetic`` and
``split_disjoint_classes``.
"""

import csv
import gzip
import logging
from dataclasses import dataclass, field

import numpy as np

from batch_sampler import class_index
from errors import ConfigError, ParseError

logger = logging.getLogger(__name__)

SPLIT_MODES = ("first-half-classes", "explicit-class-lists", "fraction")


@dataclass(frozen=True)
class Dataset:
    """Feature vectors with contiguous class ids.

    :param features: M x D_in feature matrix
    :type features: np.ndarray
    :param labels: Class id of every row, in 0..C-1
    :type labels: np.ndarray
    :param name: Where the data came from
    :type name: str
    :param metadata: Free-form provenance, e.g. the original class ids
    :type metadata: dict
    """

    features: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if features.ndim != 2 or features.shape[0] != labels.shape[0]:
            raise ConfigError("%s labels for features of shape %s"
                              % (labels.shape[0], features.shape), "dataset")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    @property
    def class_index(self):
        return class_index(self.labels)

    @property
    def n_classes(self):
        return np.unique(self.labels).size

    @property
    def size(self):
        return self.labels.shape[0]

    @property
    def input_dim(self):
        return self.features.shape[1]


def remap_labels(labels):
    """Get labels renumbered 0..C-1 in ascending order of the originals.

    :return: New labels and the original id of every new id
    :rtype: tuple[np.ndarray, list[int]]
    """
    original, ret = np.unique(np.asarray(labels), return_inverse=True)
    return ret.astype(np.int64), [int(e) for e in original]


@dataclass(frozen=True)
class CsvSchema:
    """Column layout of a feature CSV file."""

    label_column: str = "label"
    feature_prefix: str = "f"

    def expected_header(self, n_features):
        return [self.label_column] + ["%s%s" % (self.feature_prefix, i)
                                      for i in range(n_features)]


def _open_text(path):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rt", encoding="utf-8", newline="")
    return open(path, encoding="utf-8", newline="")


def load_feature_csv(path, schema=None):
    """Read a ``label,f0,...,f{D-1}`` feature file.

    Rows keep their order. Class ids are remapped to 0..C-1 in ascending
    order of the original ids, which are kept in
    ``metadata["original_labels"]``. Files ending in ``.gz`` are read
    through gzip.

    :param path: Path to the CSV file
    :type path: str
    :param schema: Column layout
    :type schema: CsvSchema
    :rtype: Dataset
    :raise ParseError: Bad header, ragged row, non-numeric cell or no rows
    """
    schema = schema or CsvSchema()
    labels = []
    rows = []
    with _open_text(path) as fp:
        reader = csv.reader(fp)
        header = next(reader, None)
        if header is None:
            raise ParseError("empty file", 1)
        header = [e.strip() for e in header]
        if len(header) < 2 or header != schema.expected_header(
                len(header) - 1):
            raise ParseError("header must be %s,%s0,...; got %s"
                             % (schema.label_column, schema.feature_prefix,
                                ",".join(header[:4])), 1)
        n_features = len(header) - 1
        for line_num, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != n_features + 1:
                raise ParseError("expected %s cells, got %s"
                                 % (n_features + 1, len(row)), line_num)
            try:
                labels.append(int(row[0]))
                rows.append([float(e) for e in row[1:]])
            except ValueError as e:
                raise ParseError("non-numeric cell (%s)" % e,
                                 line_num) from None
    if not rows:
        raise ParseError("no data rows", 2)

    features = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(features)):
        bad = int(np.flatnonzero(~np.isfinite(features).all(axis=1))[0])
        raise ParseError("non-finite feature", bad + 2)
    remapped, original = remap_labels(labels)
    logger.info("Read %s rows of %s features, %s classes from %s",
                len(rows), n_features, len(original), path)
    return Dataset(features, remapped, str(path),
                   {"original_labels": original})


@dataclass(frozen=True)
class SyntheticSpec:
    """Isotropic Gaussian classes around random centers.

    ``center_spread`` is the standard deviation of the class centers and
    ``noise_sigma`` that of the samples around their center.
    """

    n_classes: int = 16
    samples_per_class: int = 40
    input_dim: int = 32
    center_spread: float = 5.0
    noise_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_classes", "samples_per_class", "input_dim"):
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1, got %r" % getattr(self, name),
                                  name)
        if self.center_spread <= 0:
            raise ConfigError("must be > 0, got %r" % self.center_spread,
                              "center_spread")
        if self.noise_sigma < 0:
            raise ConfigError("must be >= 0, got %r" % self.noise_sigma,
                              "noise_sigma")


def gen_synthetic(spec):
    """Draw a synthetic dataset, rows grouped by class.

    :type spec: SyntheticSpec
    :rtype: Dataset
    """
    generator = np.random.Generator(np.random.PCG64(spec.seed))
    centers = spec.center_spread * generator.standard_normal(
        (spec.n_classes, spec.input_dim))
    labels = np.repeat(np.arange(spec.n_classes), spec.samples_per_class)
    noise = generator.standard_normal((labels.size, spec.input_dim))
    features = centers[labels] + spec.noise_sigma * noise
    ratio = spec.center_spread / spec.noise_sigma \
        if spec.noise_sigma > 0 else float("inf")
    return Dataset(features, labels, "synthetic",
                   {"separability": ratio, "seed": spec.seed})


@dataclass(frozen=True)
class SplitSpec:
    """How classes are divided between training and test.

    ``first-half-classes`` trains on the first ``C // 2`` class ids,
    ``explicit-class-lists`` uses ``train_classes`` and ``test_classes``
    and ``fraction`` trains on the first ``round(fraction * C)`` ids.
    """

    mode: str = "first-half-classes"
    train_classes: tuple = ()
    test_classes: tuple = ()
    fraction: float = 0.5

    def __post_init__(self):
        if self.mode not in SPLIT_MODES:
            raise ConfigError("unknown split mode %r" % self.mode, "split")
        if self.mode == "fraction" and not 0.0 < self.fraction < 1.0:
            raise ConfigError("must lie in (0, 1), got %r" % self.fraction,
                              "fraction")


def _subset(ds, classes, suffix):
    classes = np.asarray(sorted(classes), dtype=np.int64)
    rows = np.flatnonzero(np.isin(ds.labels, classes))
    labels, original = remap_labels(ds.labels[rows])
    metadata = dict(ds.metadata, split=suffix, source_classes=original,
                    source_rows=rows.tolist())
    return Dataset(ds.features[rows], labels, "%s/%s" % (ds.name, suffix),
                   metadata)


def split_disjoint_classes(ds, spec=None):
    """Split a dataset into class-disjoint train and test datasets.

    Each side gets its own contiguous labels; the class ids of ``ds``
    they came from are kept in ``metadata["source_classes"]``.

    :type ds: Dataset
    :type spec: SplitSpec
    :rtype: tuple[Dataset, Dataset]
    :raise ConfigError: Fewer than 2 classes, overlap, or an empty side
    """
    spec = spec or SplitSpec()
    classes = np.unique(ds.labels)
    if classes.size < 2:
        raise ConfigError("need >= 2 classes to split, got %s"
                          % classes.size, "split")
    if spec.mode == "first-half-classes":
        train = classes[:classes.size // 2]
        test = classes[classes.size // 2:]
    elif spec.mode == "fraction":
        n_train = int(round(spec.fraction * classes.size))
        train, test = classes[:n_train], classes[n_train:]
    else:
        train = np.intersect1d(classes, spec.train_classes)
        test = np.intersect1d(classes, spec.test_classes)
        if np.intersect1d(train, test).size:
            raise ConfigError("train and test classes overlap", "split")
    if train.size == 0 or test.size == 0:
        raise ConfigError("split leaves %s train and %s test classes"
                          % (train.size, test.size), "split")
    return _subset(ds, train, "train"), _subset(ds, test, "test")
