"""Seeded random job documents and registries built from the templates"""
import random
from typing import Dict, List, Tuple

from src.control_plane.records import ComputeRecord, DatasetRecord
from src.templates import classical, coordinated, distributed, hierarchical, hybrid

from .conftest import make_datasets

REALMS = ["us/west/org1", "us/west/org2", "us/east/org3", "eu/north/org4"]
BACKENDS = ["BrokerSim", "PointToPoint", "mqtt", "p2p"]


def split_randomly(rng: random.Random, names: List[str]) -> Dict[str, List[str]]:
    shuffled = list(names)
    rng.shuffle(shuffled)
    cuts = sorted(rng.sample(range(1, len(shuffled)), rng.randint(0, len(shuffled) - 1))) if len(shuffled) > 1 else []
    groups, start = {}, 0
    for i, end in enumerate(cuts + [len(shuffled)]):
        groups[f"g{i}"] = shuffled[start:end]
        start = end
    return groups


def random_hyperparams(rng: random.Random) -> dict:
    return {"rounds": rng.randint(1, 50), "epochs": rng.randint(1, 5),
            "learningRate": round(rng.uniform(0.001, 0.5), 4), "dims": rng.choice([2, 8, 64])}


def random_backend(rng: random.Random, names: List[str]):
    kind = rng.choice(BACKENDS)
    if rng.random() < 0.5:
        return kind
    return {"kind": kind, "bandwidthShape": {f"trainer-{rng.randrange(len(names))}": float(rng.choice([1e5, 1e6, 1e8])),
                                             "*": 1e9}}


def random_document(rng: random.Random) -> dict:
    names = [f"ds{i}" for i in range(rng.randint(1, 9))]
    hyperparams = random_hyperparams(rng)
    kind = rng.choice(["c-fl", "h-fl", "co-fl", "distributed", "hybrid"])
    name = f"{kind}-{rng.randrange(10_000)}"
    if kind == "c-fl":
        document = classical(names, hyperparams, name=name)
    elif kind == "h-fl":
        document = hierarchical(split_randomly(rng, names), hyperparams, name=name)
    elif kind == "co-fl":
        document = coordinated(names, aggregators=rng.randint(1, 4), hyperparams=hyperparams, name=name)
    elif kind == "distributed":
        document = distributed(names, hyperparams, name=name)
    else:
        straggler = f"trainer-{rng.randrange(len(names))}" if rng.random() < 0.5 else None
        document = hybrid(split_randomly(rng, names), hyperparams, straggler=straggler, name=name)
    document["channels"][0]["backend"] = random_backend(rng, names)
    if rng.random() < 0.5:
        document["roles"] = list(reversed(document["roles"]))
    return document


def random_registry(rng: random.Random, document: dict) -> Tuple[List[DatasetRecord], List[ComputeRecord]]:
    """Datasets spread over REALMS and computes that admit every one of them"""
    names = [ds for group in document["datasetGroups"].values() for ds in group]
    datasets = [record for name in names for record in make_datasets([name], realm=rng.choice(REALMS))]
    computes = [ComputeRecord(compute_id="compute-root", realm="*", capacity=64)]
    for realm in rng.sample(["us", "us/west", "us/east", "eu", "us/west/org1"], rng.randint(0, 3)):
        computes.append(ComputeRecord(compute_id=f"compute-{realm.replace('/', '-')}", realm=realm, capacity=16))
    return datasets, computes
