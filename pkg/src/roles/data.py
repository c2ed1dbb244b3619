"""
Synthetic regression data standing in for real datasets.

A dataset is fully described by its locator, e.g.
``synthetic://west-a?seed=7&n=200&d=16&skew=0.5&noise=0.1&model_seed=0``;
regenerating from the same parameters is bit-identical. All datasets of a
job share ``model_seed`` (the ground-truth weights); ``skew`` shifts the
feature distribution per dataset for non-IID partitions.
"""
from dataclasses import dataclass, field
from typing import Dict
from urllib.parse import parse_qs, urlencode, urlparse

import numpy as np

SCHEME = "synthetic"


@dataclass(frozen=True)
class SyntheticDataset:
    seed: int
    n: int
    d: int
    skew: float = 0.0
    noise: float = 0.1
    model_seed: int = 0
    name: str = "data"
    features: np.ndarray = field(init=False, repr=False, compare=False)
    labels: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        truth = np.random.default_rng(self.model_seed).normal(size=self.d)
        rng = np.random.default_rng(self.seed)
        shift = self.skew * rng.normal(size=self.d)
        features = rng.normal(loc=shift, scale=1.0, size=(self.n, self.d))
        labels = features @ truth + self.noise * rng.normal(size=self.n)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.n

    @property
    def url(self) -> str:
        return synthetic_url(self.name, seed=self.seed, n=self.n, d=self.d, skew=self.skew,
                             noise=self.noise, model_seed=self.model_seed)

    def true_weights(self) -> np.ndarray:
        return np.random.default_rng(self.model_seed).normal(size=self.d)


def synthetic_url(name: str, **params) -> str:
    return f"{SCHEME}://{name}?{urlencode(params)}"


def load_dataset(url: str) -> SyntheticDataset:
    """Materialize a dataset from its locator"""
    parsed = urlparse(url)
    if parsed.scheme != SCHEME:
        raise ValueError(f"unsupported dataset locator {url!r}")
    query: Dict[str, str] = {k: v[-1] for k, v in parse_qs(parsed.query).items()}
    return SyntheticDataset(
        seed=int(query.get("seed", 0)),
        n=int(query.get("n", 100)),
        d=int(query.get("d", 8)),
        skew=float(query.get("skew", 0.0)),
        noise=float(query.get("noise", 0.1)),
        model_seed=int(query.get("model_seed", 0)),
        name=parsed.netloc or "data",
    )
