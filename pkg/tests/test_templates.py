import pytest

from src.control_plane.records import ComputeRecord
from src.expansion import expand
from src.experiments.common import dataset_names, split_groups, synthetic_records
from src.tag.parser import parse_job_spec
from src.templates import (TEMPLATES, TemplateDiff, coordinated, diff_templates, distributed, hierarchical,
                           hybrid, load_template, template_document)
from src.validators import pre_check

COMPUTES = [ComputeRecord(compute_id="compute-local", realm="local", capacity=5000)]


class TestTemplates:
    @pytest.mark.parametrize("name", sorted(TEMPLATES))
    def test_every_template_passes_pre_check(self, name):
        spec = load_template(name)
        assert pre_check(spec).is_empty
        assert spec.job_name == name

    def test_hyperparams_are_merged(self):
        document = template_document("c-fl", hyperparams={"rounds": 9})
        assert document["hyperparams"]["rounds"] == 9
        assert document["hyperparams"]["dims"] == 8

    def test_unknown_template(self):
        with pytest.raises(KeyError):
            template_document("ring")

    def test_hybrid_straggler_shaping(self):
        spec = load_template("hybrid", straggler="trainer-3", straggler_bps=5e5)
        param = next(c for c in spec.channels if c.name == "param-channel")
        group = next(c for c in spec.channels if c.name == "group-channel")
        assert param.backend.kind == "BrokerSim"
        assert param.backend.bandwidth_shape == {"trainer-3": 5e5}
        assert group.backend.kind == "PointToPoint"
        assert group.is_self_channel


class TestTemplateDiffs:
    def test_classical_to_hierarchical(self):
        diff = diff_templates("c-fl", "h-fl")
        assert diff == TemplateDiff(code=["+ aggregator"], tag=["+ channel"], metadata=["Δ datasetGroups"])

    def test_classical_to_distributed(self):
        diff = diff_templates("c-fl", "distributed")
        assert diff.code == ["- global-aggregator", "Δ inheritance"]
        assert diff.tag == ["Δ channel"]
        assert diff.metadata == []

    def test_hierarchical_to_coordinated(self):
        diff = diff_templates("h-fl", "co-fl")
        assert diff.code == ["+ coordinator", "Δ inheritance"]
        assert diff.tag == ["+ replica", "+ channels", "Δ groupBy"]
        assert diff.metadata == ["Δ datasetGroups"]

    def test_classical_to_hybrid(self):
        diff = diff_templates("c-fl", "hybrid")
        assert diff.code == ["Δ inheritance"]
        assert diff.tag == ["+ channel"]
        assert diff.metadata == ["Δ datasetGroups"]

    def test_identity(self):
        assert diff_templates("co-fl", "co-fl") == TemplateDiff()

    def test_lines_are_prefixed(self):
        assert diff_templates("c-fl", "h-fl").lines() == [
            "code: + aggregator", "tag: + channel", "metadata: Δ datasetGroups"]


def sweep_documents(names):
    groups = split_groups(names, min(2, len(names)))
    return {
        "c-fl": (template_document("c-fl", datasets=names), len(names) + 1),
        "h-fl": (hierarchical(groups), len(names) + len(groups) + 1),
        "co-fl": (coordinated(names), len(names) + 4),
        "distributed": (distributed(names), len(names)),
        "hybrid": (hybrid(groups), len(names) + 1),
    }


class TestExpansionSweep:
    @pytest.mark.parametrize("size", [1, 2, 7, 100, 1000])
    def test_templates_expand(self, size):
        names = dataset_names(size)
        datasets = synthetic_records(names, seed=0)
        for name, (document, expected) in sweep_documents(names).items():
            spec = parse_job_spec(document)
            assert pre_check(spec).is_empty, name
            topology = expand(spec, datasets, COMPUTES, job_id=f"{name}-{size}")
            assert len(topology.workers) == expected, name
            assert len({w.worker_id for w in topology.workers}) == expected
