import random

import pytest

from src.exceptions import DuplicateAlias, LoopNestingError, StopRequested, TaskFailure, UnknownAlias
from src.tasklet import Loop, Tasklet, chain, step


class Recorder:
    def __init__(self, rounds=3):
        self.calls = []
        self.round = 0
        self.rounds = rounds

    def note(self, name):
        return Tasklet(name, lambda state: state.calls.append(name))

    def advance(self):
        self.round += 1
        self.calls.append("advance")

    @property
    def work_done(self):
        return self.round >= self.rounds


def training_chain(state):
    load, init = state.note("load"), state.note("init")
    get, train = state.note("get"), Tasklet("advance", step("advance"))
    put, save = state.note("put"), state.note("save")
    return load >> init >> Loop(lambda: state.work_done)(get >> train >> put) >> save


class TestComposition:
    def test_runs_in_order_with_loop(self):
        state = Recorder(rounds=2)
        training_chain(state).run(state)
        assert state.calls == ["load", "init", "get", "advance", "put", "get", "advance", "put", "save"]

    def test_loop_is_do_while(self):
        state = Recorder(rounds=0)
        training_chain(state).run(state)
        assert state.calls.count("get") == 1

    def test_loop_predicate_may_take_state(self):
        state = Recorder(rounds=2)
        body = Loop(lambda s: s.work_done)(Tasklet("advance", step("advance")))
        body.run(state)
        assert state.round == 2

    def test_loop_spans(self):
        state = Recorder()
        spans = training_chain(state).loop_spans
        assert [(first, last) for first, last, _ in spans] == [("get", "put")]

    def test_duplicate_alias(self):
        state = Recorder()
        with pytest.raises(DuplicateAlias):
            chain(state.note("load"), state.note("load"))

    def test_nested_loops_rejected(self):
        state = Recorder()
        inner = Loop(lambda: True)(state.note("a") >> state.note("b"))
        with pytest.raises(LoopNestingError):
            Loop(lambda: True)(inner)

    def test_step_binds_late(self):
        class Override(Recorder):
            def advance(self):
                self.round += 10

        state = Override(rounds=1)
        Tasklet("advance", step("advance")).body(state)
        assert state.round == 10


class TestEdits:
    def test_insert_into_loop(self):
        state = Recorder(rounds=1)
        flow = training_chain(state)
        flow.get_tasklet("put").insert_before(state.note("evaluate"))
        flow.get_tasklet("save").insert_after(state.note("report"))
        flow.run(state)
        assert state.calls == ["load", "init", "get", "advance", "evaluate", "put", "save", "report"]
        assert [(first, last) for first, last, _ in flow.loop_spans] == [("get", "put")]

    def test_replace_keeps_loop_membership(self):
        state = Recorder(rounds=2)
        flow = training_chain(state)
        flow.get_tasklet("get").replace_with(state.note("fetch"))
        flow.run(state)
        assert state.calls.count("fetch") == 2
        assert "get" not in flow.aliases()

    def test_remove(self):
        state = Recorder(rounds=1)
        flow = training_chain(state)
        removed = flow.get_tasklet("init")
        removed.remove()
        assert "init" not in flow.aliases()
        with pytest.raises(UnknownAlias):
            removed.remove()

    def test_unknown_alias(self):
        with pytest.raises(UnknownAlias):
            training_chain(Recorder()).get_tasklet("missing")

    def test_insert_duplicate(self):
        state = Recorder()
        flow = training_chain(state)
        with pytest.raises(DuplicateAlias):
            flow.get_tasklet("get").insert_after(state.note("put"))

    def test_rejected_insert_leaves_loop_untouched(self):
        state = Recorder()
        flow = training_chain(state)
        inside = flow.get_tasklet("get")
        with pytest.raises(DuplicateAlias):
            flow.get_tasklet("load").insert_before(inside)
        with pytest.raises(DuplicateAlias):
            flow.get_tasklet("save").insert_after(inside)
        assert [(first, last) for first, last, _ in flow.loop_spans] == [("get", "put")]
        assert flow.aliases() == ["load", "init", "get", "advance", "put", "save"]

    def test_rejected_replace_leaves_chain_untouched(self):
        state = Recorder()
        flow = training_chain(state)
        with pytest.raises(DuplicateAlias):
            flow.get_tasklet("init").replace_with(flow.get_tasklet("get"))
        assert flow.get_tasklet("get").loop is not None
        assert flow.get_tasklet("init").loop is None

    def test_replace_with_itself_is_a_no_op(self):
        state = Recorder()
        flow = training_chain(state)
        get = flow.get_tasklet("get")
        get.replace_with(get)
        assert get.loop is not None and get.chain is flow


class TestEditScripts:
    """Random edit scripts against a plain list of (alias, in_loop) pairs"""

    @staticmethod
    def observed(flow):
        return [(t.alias, t.loop is not None) for t in flow]

    @pytest.mark.parametrize("seed", range(200))
    def test_edits_match_list_model(self, seed):
        rng = random.Random(seed)
        state = Recorder()
        flow = training_chain(state)
        model = self.observed(flow)
        fresh = 0
        for _ in range(30):
            if not model:
                break
            index = rng.randrange(len(model))
            target = flow.get_tasklet(model[index][0])
            op = rng.choice(["before", "after", "replace", "remove"])
            if op == "remove":
                if len(model) == 1:
                    continue
                target.remove()
                del model[index]
            else:
                if rng.random() < 0.3:
                    alias = rng.choice(model)[0]
                else:
                    fresh += 1
                    alias = f"t{fresh}"
                new = state.note(alias)
                clash = alias in [a for a, _ in model] and not (op == "replace" and alias == model[index][0])
                edit = {"before": target.insert_before, "after": target.insert_after,
                        "replace": target.replace_with}[op]
                if clash:
                    with pytest.raises(DuplicateAlias):
                        edit(new)
                elif op == "before":
                    edit(new)
                    model.insert(index, (alias, model[index][1]))
                elif op == "after":
                    edit(new)
                    model.insert(index + 1, (alias, model[index][1]))
                else:
                    edit(new)
                    model[index] = (alias, model[index][1])
            assert self.observed(flow) == model
            assert len(flow.loop_spans) <= 1


class TestExecution:
    def test_failure_names_the_tasklet(self):
        def boom(state):
            raise ValueError("bad batch")

        state = Recorder()
        flow = state.note("load") >> Tasklet("train", boom) >> state.note("save")
        with pytest.raises(TaskFailure) as excinfo:
            flow.run(state)
        assert excinfo.value.alias == "train"
        assert isinstance(excinfo.value.cause, ValueError)
        assert state.calls == ["load"]

    def test_stop_between_tasklets(self):
        state = Recorder(rounds=100)
        flow = training_chain(state)
        with pytest.raises(StopRequested):
            flow.run(state, should_stop=lambda: state.round >= 2)
        assert state.round == 2

    def test_tracer_sees_every_execution(self):
        state = Recorder(rounds=2)
        lines = []
        training_chain(state).run(state, tracer=lambda alias, iteration, ms: lines.append((alias, iteration)))
        assert lines[:3] == [("load", 0), ("init", 0), ("get", 1)]
        assert ("put", 2) in lines
        assert lines[-1] == ("save", 0)
