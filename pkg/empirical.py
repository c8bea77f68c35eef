"""
Empirical failure curves from precomputed hypothesis records

Records are JSON lines, one object per hypothesis; utility matrices are JSON
lines, one object per query.  Strategies replay a reranker on the first N
hypotheses of each query (or on seeded subsets of size N) and count a
failure whenever the selected hypothesis is unacceptable.
"""

import json
import logging
import math
from collections import Counter, OrderedDict
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from channel_sim import CurvePoint, FailureCurve, substream, wilson_interval
from error_laws import BetaGenerator, GeneratorSpec
from utils import LOGGER_NAME, DatasetParseError, DatasetValidationError, InvalidArgumentError

logger = logging.getLogger(LOGGER_NAME)

STRATEGIES = ('oracle', 'majority', 'mbr', 'score')


class HypothesisRecord(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    query_id: str
    hyp_index: int = Field(ge=0)
    acceptable: Optional[bool] = None
    rerank_score: Optional[float] = None
    oracle_score: Optional[float] = None
    exec_result: Optional[str] = None
    split: Optional[str] = None
    group: Optional[str] = None


class UtilityMatrix(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    query_id: str
    mode: Literal['utility', 'loss'] = 'utility'
    values: Tuple[Tuple[float, ...], ...]

    @field_validator('values')
    @classmethod
    def _check_square(cls, v: Tuple[Tuple[float, ...], ...]) -> Tuple[Tuple[float, ...], ...]:
        if not v or any(len(row) != len(v) for row in v):
            raise ValueError("utility matrix must be square and non-empty")
        if any(not math.isfinite(x) for row in v for x in row):
            raise ValueError("utility matrix entries must be finite")
        return v

    @property
    def size(self) -> int:
        return len(self.values)

    @property
    def array(self) -> np.ndarray:
        return np.array(self.values, dtype=float)


class EmpiricalDataset(BaseModel):
    model_config = ConfigDict(frozen=True)

    queries: Dict[str, Tuple[HypothesisRecord, ...]] = Field(default_factory=dict)
    utilities: Dict[str, UtilityMatrix] = Field(default_factory=dict)
    threshold: Optional[float] = None
    # query_id -> reason, for queries removed while loading
    rejected: Dict[str, str] = Field(default_factory=dict)

    def filtered(self, split: Optional[str] = None, group: Optional[str] = None) -> 'EmpiricalDataset':
        keep = OrderedDict(
            (qid, recs) for qid, recs in self.queries.items()
            if (split is None or recs[0].split == split) and (group is None or recs[0].group == group)
        )
        return self.model_copy(update={
            'queries': keep,
            'utilities': {q: u for q, u in self.utilities.items() if q in keep},
        })


# ---------------------------------------------------------------------------
# Loading and writing
# ---------------------------------------------------------------------------

def _iter_json_lines(path: str):
    with open(path, encoding='utf-8') as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetParseError(f"invalid JSON: {e.msg}", line_number)
            if not isinstance(obj, dict):
                raise DatasetParseError("expected a JSON object", line_number)
            yield line_number, obj


def _query_problem(records: List[HypothesisRecord]) -> Optional[str]:
    indices = [r.hyp_index for r in records]
    if indices != list(range(len(records))):
        return f"hyp_index values {sorted(indices)} are not unique and contiguous from 0"
    if len({(r.split, r.group) for r in records}) > 1:
        return "records disagree on split/group"
    return None


def load_dataset(records_path: str, utilities_path: Optional[str] = None,
                 threshold: Optional[float] = None) -> EmpiricalDataset:
    """Read hypothesis records (and optional utility matrices) into a validated dataset.

    `acceptable` is derived as oracle_score >= threshold when absent.  Queries
    whose records break the index invariants are dropped and reported in
    `rejected`.
    """
    grouped: Dict[str, List[HypothesisRecord]] = OrderedDict()
    for line_number, obj in _iter_json_lines(records_path):
        try:
            rec = HypothesisRecord(**obj)
        except ValidationError as e:
            raise DatasetParseError(f"bad record: {e.errors()[0]['msg']} ({e.errors()[0]['loc']})", line_number)
        if rec.acceptable is None:
            if rec.oracle_score is None or threshold is None:
                raise DatasetValidationError(
                    f"line {line_number}: record has neither 'acceptable' nor an oracle_score with a threshold")
            rec = rec.model_copy(update={'acceptable': rec.oracle_score >= threshold})
        grouped.setdefault(rec.query_id, []).append(rec)

    queries: Dict[str, Tuple[HypothesisRecord, ...]] = OrderedDict()
    rejected: Dict[str, str] = {}
    for qid, recs in grouped.items():
        recs.sort(key=lambda r: r.hyp_index)
        problem = _query_problem(recs)
        if problem:
            rejected[qid] = problem
        else:
            queries[qid] = tuple(recs)

    utilities: Dict[str, UtilityMatrix] = {}
    if utilities_path:
        for line_number, obj in _iter_json_lines(utilities_path):
            try:
                mat = UtilityMatrix(**obj)
            except ValidationError as e:
                raise DatasetParseError(f"bad utility matrix: {e.errors()[0]['msg']}", line_number)
            if mat.query_id not in queries:
                logger.warning(f"Utility matrix for unknown query {mat.query_id!r} ignored")
                continue
            if mat.size != len(queries[mat.query_id]):
                rejected[mat.query_id] = (f"utility matrix is {mat.size}x{mat.size} but the query has "
                                          f"{len(queries[mat.query_id])} hypotheses")
                del queries[mat.query_id]
                continue
            utilities[mat.query_id] = mat

    for qid, reason in rejected.items():
        logger.warning(f"Rejected query {qid!r}: {reason}")
    logger.info(f"Loaded {len(queries)} queries from {records_path} ({len(rejected)} rejected)")
    return EmpiricalDataset(queries=queries, utilities=utilities, threshold=threshold, rejected=rejected)


def write_dataset(dataset: EmpiricalDataset, records_path: str, utilities_path: Optional[str] = None) -> None:
    with open(records_path, 'w', encoding='utf-8') as f:
        for recs in dataset.queries.values():
            for r in recs:
                f.write(json.dumps(r.model_dump(exclude_none=True), sort_keys=True) + '\n')
    if utilities_path:
        with open(utilities_path, 'w', encoding='utf-8') as f:
            for mat in dataset.utilities.values():
                f.write(json.dumps(mat.model_dump(), sort_keys=True) + '\n')


def synthesize_dataset(generator: GeneratorSpec, n_queries: int, n_hypotheses: int,
                       seed: int = 0, split: Optional[str] = None) -> EmpiricalDataset:
    """Acceptability flags sampled from a generator model, one tau per query."""
    if n_queries < 0 or n_hypotheses < 1:
        raise InvalidArgumentError("need n_queries >= 0 and n_hypotheses >= 1")
    rng = substream(seed, n_queries, n_hypotheses)
    if isinstance(generator, BetaGenerator):
        tau = rng.beta(generator.alpha, generator.beta, n_queries)
    else:
        tau = np.full(n_queries, generator.epsilon)
    unacceptable = rng.random((n_queries, n_hypotheses)) < tau[:, None]
    queries: Dict[str, Tuple[HypothesisRecord, ...]] = OrderedDict()
    width = len(str(max(n_queries - 1, 0)))
    for q in range(n_queries):
        qid = f"q{q:0{width}d}"
        queries[qid] = tuple(
            HypothesisRecord(query_id=qid, hyp_index=i, acceptable=not bool(unacceptable[q, i]), split=split)
            for i in range(n_hypotheses)
        )
    return EmpiricalDataset(queries=queries)


# ---------------------------------------------------------------------------
# Selection strategies
# ---------------------------------------------------------------------------

def _first_argmax(keys: Sequence[float]) -> int:
    best = 0
    for i in range(1, len(keys)):
        if keys[i] > keys[best]:
            best = i
    return best


def select_majority_vote(records: Sequence[HypothesisRecord]) -> Optional[int]:
    """Earliest member of the most frequent execution result; None if nothing executed."""
    executed = [r for r in records if r.exec_result]
    if not executed:
        return None
    counts = Counter(r.exec_result for r in executed)
    top = max(counts.values())
    # records are in hyp_index order, so the first modal hit is the earliest member
    for r in executed:
        if counts[r.exec_result] == top:
            return r.hyp_index
    return None


def select_mbr(matrix: UtilityMatrix, prefix_n: int, include_self: bool = False,
               candidates: Optional[Sequence[int]] = None) -> int:
    """Minimum-Bayes-risk pick among the first prefix_n candidates (or an explicit subset).

    score(i) = sum_j values[i][j], self excluded unless include_self; argmax in
    utility mode, argmin in loss mode, ties to the smallest index.
    """
    if candidates is None:
        if not 1 <= prefix_n <= matrix.size:
            raise InvalidArgumentError(f"prefix_n must lie in [1, {matrix.size}], got {prefix_n}")
        idx = np.arange(prefix_n)
    else:
        idx = np.asarray(candidates, dtype=int)
        if idx.size == 0 or idx.min() < 0 or idx.max() >= matrix.size:
            raise InvalidArgumentError("candidate indices out of range")
    block = matrix.array[np.ix_(idx, idx)]
    scores = block.sum(axis=1)
    if not include_self:
        scores = scores - np.diag(block)
    pick = int(np.argmin(scores) if matrix.mode == 'loss' else np.argmax(scores))
    return int(idx[pick])


def select_by_score(records: Sequence[HypothesisRecord]) -> int:
    """Highest rerank_score, ties to the lowest hyp_index."""
    if any(r.rerank_score is None for r in records):
        raise DatasetValidationError(f"query {records[0].query_id!r}: 'score' strategy needs rerank_score")
    return records[_first_argmax([float(r.rerank_score) for r in records])].hyp_index


def _oracle_keys(records: Sequence[HypothesisRecord]) -> List[float]:
    if all(r.oracle_score is not None for r in records):
        return [float(r.oracle_score) for r in records]
    if all(r.acceptable is not None for r in records):
        return [1.0 if r.acceptable else 0.0 for r in records]
    raise DatasetValidationError(
        f"query {records[0].query_id!r}: 'oracle' strategy needs oracle_score or acceptable on every record")


def select_oracle(records: Sequence[HypothesisRecord]) -> int:
    """Highest oracle_score; with flags only, the first acceptable record (index 0 if none)."""
    return records[_first_argmax(_oracle_keys(records))].hyp_index


def exec_match_loss_matrix(records: Sequence[HypothesisRecord]) -> UtilityMatrix:
    """0/1 loss between execution results; a hypothesis without a result matches nothing but itself."""
    n = len(records)
    values = []
    for i, a in enumerate(records):
        row = []
        for j, b in enumerate(records):
            same = i == j or (bool(a.exec_result) and a.exec_result == b.exec_result)
            row.append(0.0 if same else 1.0)
        values.append(tuple(row))
    return UtilityMatrix(query_id=records[0].query_id if n else '', mode='loss', values=tuple(values))


# ---------------------------------------------------------------------------
# Curves
# ---------------------------------------------------------------------------

class Subsampling(BaseModel):
    model_config = ConfigDict(frozen=True)

    mode: Literal['prefix', 'bootstrap'] = 'prefix'
    samples: int = Field(default=1, ge=1)
    seed: int = 0


def _select(strategy: str, records: Sequence[HypothesisRecord], matrix: Optional[UtilityMatrix],
            candidates: Sequence[int], include_self: bool) -> Optional[int]:
    subset = [records[i] for i in candidates]
    if strategy == 'oracle':
        return select_oracle(subset)
    if strategy == 'score':
        return select_by_score(subset)
    if strategy == 'majority':
        return select_majority_vote(subset)
    if matrix is None:
        raise DatasetValidationError(
            f"query {records[0].query_id!r}: 'mbr' strategy needs a utility matrix or exec_result values")
    return select_mbr(matrix, len(candidates), include_self=include_self, candidates=candidates)


def _mbr_matrix(dataset: EmpiricalDataset, qid: str, records: Sequence[HypothesisRecord]) -> Optional[UtilityMatrix]:
    if qid in dataset.utilities:
        return dataset.utilities[qid]
    if any(r.exec_result for r in records):
        return exec_match_loss_matrix(records)
    return None


def _prefix_failures_running(records: Sequence[HypothesisRecord], keys: List[float]) -> List[bool]:
    """Failure outcome of a first-argmax strategy for every prefix length, in one pass."""
    out = []
    best = 0
    for i in range(len(records)):
        if keys[i] > keys[best]:
            best = i
        out.append(not records[best].acceptable)
    return out


def empirical_failure_curve(dataset: EmpiricalDataset, strategy: str, n_grid: Sequence[int],
                            subsampling: Optional[Subsampling] = None, ci_level: float = 0.99,
                            include_self: bool = False, split: Optional[str] = None,
                            group: Optional[str] = None) -> FailureCurve:
    """Failure rate of `strategy` at every N of the grid, one outcome per query and subset."""
    if strategy not in STRATEGIES:
        raise InvalidArgumentError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    subsampling = subsampling or Subsampling()
    grid = [int(n) for n in n_grid]
    if not grid or grid[0] < 1 or any(b <= a for a, b in zip(grid, grid[1:])):
        raise InvalidArgumentError("n_grid must be strictly increasing positive integers")
    data = dataset.filtered(split=split, group=group)

    failures = {n: 0 for n in grid}
    trials = {n: 0 for n in grid}
    dropped = {n: 0 for n in grid}
    running = subsampling.mode == 'prefix' and strategy in ('oracle', 'score')

    for ordinal, (qid, records) in enumerate(data.queries.items()):
        size = len(records)
        if running:
            # only the longest prefix the grid reaches has to carry scores
            reach = records[:grid[-1]]
            if strategy == 'oracle':
                keys = _oracle_keys(reach)
            else:
                select_by_score(reach)
                keys = [float(r.rerank_score) for r in reach]
            outcomes = _prefix_failures_running(reach, keys)
        matrix = _mbr_matrix(data, qid, records) if strategy == 'mbr' else None
        for n in grid:
            if n > size:
                dropped[n] += 1
                continue
            if running:
                failures[n] += int(outcomes[n - 1])
                trials[n] += 1
                continue
            if subsampling.mode == 'prefix':
                subsets = [list(range(n))]
            else:
                rng = substream(subsampling.seed, n, ordinal)
                subsets = [sorted(rng.choice(size, size=n, replace=False).tolist())
                           for _ in range(subsampling.samples)]
            for cand in subsets:
                pick = _select(strategy, records, matrix, cand, include_self)
                failures[n] += int(pick is None or not records[pick].acceptable)
                trials[n] += 1

    points = []
    for n in grid:
        if dropped[n]:
            logger.warning(f"n={n}: {dropped[n]} queries have fewer than {n} hypotheses and were dropped")
        if trials[n] == 0:
            logger.warning(f"n={n}: no query has enough hypotheses; point omitted")
            continue
        low, high = wilson_interval(failures[n], trials[n], ci_level)
        points.append(CurvePoint(n=n, failure_rate=failures[n] / trials[n], trials=trials[n],
                                 ci_low=low, ci_high=high))

    metadata = {
        'source': 'empirical',
        'strategy': strategy,
        'subsampling': subsampling.mode,
        'bootstrap_samples': subsampling.samples if subsampling.mode == 'bootstrap' else None,
        'seed': subsampling.seed if subsampling.mode == 'bootstrap' else None,
        'queries': len(data.queries),
        'split': split,
        'group': group,
        'pooling': 'pooled' if group is None else f'group={group}',
        'mbr_include_self': include_self if strategy == 'mbr' else None,
        'dropped': {str(n): c for n, c in dropped.items() if c},
        'rejected_queries': len(dataset.rejected),
    }
    logger.info(f"Empirical {strategy} curve over {len(data.queries)} queries, {len(points)} points")
    return FailureCurve(points=points, metadata=metadata)
