"""
Tasklet chains: the unit of composition for role programs.

    chain = load >> init >> Loop(lambda: state.work_done)(get >> train >> put)

Loops are do-while and single level. Edits through a tasklet
(insert_before/insert_after/replace_with/remove) act on the chain that
currently owns it, and inserted tasklets join the target's loop.
"""
import inspect
import time
from typing import Any, Callable, List, Optional, Tuple, Union

from .exceptions import DuplicateAlias, LoopNestingError, StopRequested, TaskFailure, UnknownAlias

Body = Callable[[Any], Any]
Tracer = Callable[[str, int, float], None]


def step(method_name: str) -> Body:
    """Body that calls ``state.<method_name>()`` at run time, so overrides bind late"""
    def body(state):
        return getattr(state, method_name)()
    body.__name__ = method_name
    return body


class Loop:
    def __init__(self, loop_check_fn: Callable[..., bool]):
        self.loop_check_fn = loop_check_fn
        try:
            self._takes_state = len(inspect.signature(loop_check_fn).parameters) >= 1
        except (TypeError, ValueError):
            self._takes_state = False

    def done(self, state) -> bool:
        return bool(self.loop_check_fn(state) if self._takes_state else self.loop_check_fn())

    def __call__(self, span: Union["Tasklet", "TaskletChain"]) -> "TaskletChain":
        return wrap_loop(self, span)


class Tasklet:
    def __init__(self, alias: str, body: Body):
        self.alias = alias
        self.body = body
        self.loop: Optional[Loop] = None
        self.chain: Optional["TaskletChain"] = None

    def __repr__(self):
        return f"Tasklet({self.alias!r})"

    def __rshift__(self, other) -> "TaskletChain":
        return chain(self, other)

    def _owner(self) -> "TaskletChain":
        if self.chain is None:
            raise UnknownAlias(self.alias)
        return self.chain

    def insert_before(self, new: "Tasklet"):
        self._owner().insert_before(self, new)

    def insert_after(self, new: "Tasklet"):
        self._owner().insert_after(self, new)

    def replace_with(self, new: "Tasklet"):
        self._owner().replace_with(self, new)

    def remove(self):
        self._owner().remove(self)


class TaskletChain:
    def __init__(self, tasklets: Optional[List[Tasklet]] = None):
        self.tasklets: List[Tasklet] = []
        for tasklet in tasklets or []:
            self._adopt(tasklet)
        self._check_loops()

    def __len__(self):
        return len(self.tasklets)

    def __iter__(self):
        return iter(self.tasklets)

    def __rshift__(self, other) -> "TaskletChain":
        return chain(self, other)

    def __repr__(self):
        return f"TaskletChain({' >> '.join(self.aliases())})"

    def aliases(self) -> List[str]:
        return [t.alias for t in self.tasklets]

    def _reject_duplicate(self, alias: str, allowed: Optional[Tasklet] = None):
        if any(t.alias == alias and t is not allowed for t in self.tasklets):
            raise DuplicateAlias(alias)

    def _adopt(self, tasklet: Tasklet, index: Optional[int] = None):
        self._reject_duplicate(tasklet.alias)
        tasklet.chain = self
        if index is None:
            self.tasklets.append(tasklet)
        else:
            self.tasklets.insert(index, tasklet)

    def _check_loops(self):
        seen, previous = set(), None
        for t in self.tasklets:
            if t.loop is not None and t.loop is not previous and t.loop in seen:
                raise LoopNestingError("loop span is not contiguous")
            if t.loop is not None:
                seen.add(t.loop)
            previous = t.loop

    def _index(self, target: Tasklet) -> int:
        for i, t in enumerate(self.tasklets):
            if t is target:
                return i
        raise UnknownAlias(target.alias)

    @property
    def loop_spans(self) -> List[Tuple[str, str, Loop]]:
        spans = []
        i = 0
        while i < len(self.tasklets):
            loop = self.tasklets[i].loop
            if loop is None:
                i += 1
                continue
            j = i
            while j + 1 < len(self.tasklets) and self.tasklets[j + 1].loop is loop:
                j += 1
            spans.append((self.tasklets[i].alias, self.tasklets[j].alias, loop))
            i = j + 1
        return spans

    # ---- edits ----

    def get_tasklet(self, alias: str) -> Tasklet:
        for t in self.tasklets:
            if t.alias == alias:
                return t
        raise UnknownAlias(alias)

    def insert_before(self, target: Tasklet, new: Tasklet):
        index = self._index(target)
        self._reject_duplicate(new.alias)
        new.loop = target.loop
        self._adopt(new, index)

    def insert_after(self, target: Tasklet, new: Tasklet):
        index = self._index(target)
        self._reject_duplicate(new.alias)
        new.loop = target.loop
        self._adopt(new, index + 1)

    def replace_with(self, target: Tasklet, new: Tasklet):
        index = self._index(target)
        self._reject_duplicate(new.alias, allowed=target)
        if new is target:
            return
        new.loop = target.loop
        new.chain = self
        self.tasklets[index] = new
        target.chain = None
        target.loop = None

    def remove(self, target: Tasklet):
        index = self._index(target)
        del self.tasklets[index]
        target.chain = None
        target.loop = None

    # ---- execution ----

    def run(self, state: Any, should_stop: Optional[Callable[[], bool]] = None,
            tracer: Optional[Tracer] = None):
        """
        Execute tasklets in order; loop spans repeat until their predicate holds.

        Raises TaskFailure(alias, cause) on the first failing body and
        StopRequested when ``should_stop`` turns true between tasklets.
        """
        i = 0
        while i < len(self.tasklets):
            head = self.tasklets[i]
            if head.loop is None:
                _execute(head, state, 0, should_stop, tracer)
                i += 1
                continue

            loop = head.loop
            span = []
            while i < len(self.tasklets) and self.tasklets[i].loop is loop:
                span.append(self.tasklets[i])
                i += 1

            iteration = 0
            while True:
                iteration += 1
                for t in span:
                    _execute(t, state, iteration, should_stop, tracer)
                if loop.done(state):
                    break


def _execute(tasklet: Tasklet, state, iteration: int, should_stop, tracer):
    if should_stop is not None and should_stop():
        raise StopRequested(f"stop requested before {tasklet.alias}")
    started = time.perf_counter()
    try:
        tasklet.body(state)
    except (StopRequested, TaskFailure):
        raise
    except Exception as e:
        raise TaskFailure(tasklet.alias, e) from e
    finally:
        if tracer is not None:
            tracer(tasklet.alias, iteration, (time.perf_counter() - started) * 1000.0)


def _as_list(item: Union[Tasklet, TaskletChain, None]) -> List[Tasklet]:
    if item is None:
        return []
    if isinstance(item, Tasklet):
        return [item]
    return list(item.tasklets)


def chain(*items: Union[Tasklet, TaskletChain]) -> TaskletChain:
    """Concatenate tasklets/chains; aliases must stay unique"""
    tasklets: List[Tasklet] = []
    for item in items:
        tasklets.extend(_as_list(item))
    aliases = set()
    for t in tasklets:
        if t.alias in aliases:
            raise DuplicateAlias(t.alias)
        aliases.add(t.alias)
    return TaskletChain(tasklets)


def wrap_loop(loop: Union[Loop, Callable[..., bool]], span: Union[Tasklet, TaskletChain]) -> TaskletChain:
    """Make ``span`` repeat until the predicate is true, checked after each iteration"""
    if not isinstance(loop, Loop):
        loop = Loop(loop)
    tasklets = _as_list(span)
    for t in tasklets:
        if t.loop is not None:
            raise LoopNestingError(f"tasklet {t.alias!r} already belongs to a loop")
    for t in tasklets:
        t.loop = loop
    return chain(*tasklets)


def run(chain_: TaskletChain, state: Any, should_stop: Optional[Callable[[], bool]] = None,
        tracer: Optional[Tracer] = None):
    chain_.run(state, should_stop=should_stop, tracer=tracer)
