"""Full-day trip replay through emissions, market, ledger and consensus.

One deterministic event loop per run: the genesis block mints the day's
grants at 00:00, then each trip settles at its completion time and goes
through a consensus round (one round per settlement by default, batching
configurable).  The simulated clock never conflates with wall time: all
latency figures are simulated-network milliseconds.

Identical (seed, config, inputs) produce an identical final ledger hash
and byte-identical exports.
"""

from __future__ import annotations

import hashlib
import json
import statistics
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Optional

from .consensus import Behavior, ConsensusConfig, ConsensusEngine, NetworkModel, TraceRow, export_trace
from .emissions import (
    BusChargingPolicy,
    EmissionFactorTable,
    PER_SEAT_MODES,
    PricePolicy,
    TripRecord,
    trip_cost,
)
from .ledger import (
    HASH_ALGORITHM,
    Ledger,
    NodeIdentity,
    Role,
    TokenTransaction,
    TxKind,
    create_genesis,
    export_chain,
    export_wallets,
)
from .market import (
    CapPolicy,
    ISSUER_NODE,
    Market,
    MARKET_NODE,
    OPERATOR_NODE,
    RETIREMENT_NODE,
)
from .population import (
    RejectedRow,
    SurveyPerson,
    generate_synthetic,
    load_population,
    load_profile,
    write_population,
)
from .tokens import TokenAmount

MINUTES_PER_DAY = 1440


def child_seed(seed: int, label: str) -> int:
    """Stable sub-stream seed so independent components never share draws."""
    h = hashlib.sha256(f"{seed}|{label}".encode()).digest()
    return int.from_bytes(h[:8], "big") >> 1


@dataclass
class SimulationConfig:
    seed: int = 0
    n_active_nodes: int = 4
    delays_ms: tuple[float, float] = (10.0, 20.0)
    drop_probability: float = 0.0
    byzantine: tuple[tuple[int, str], ...] = ()  # (validator index, behavior)
    unsafe_faults: bool = False
    price_cad_per_tonne: float = 20.0
    seats_per_bus: float = 50.55
    operator_pays_remainder: bool = False
    cap_mode: str = "computed"  # "computed" | "explicit"
    explicit_cap_tokens: Optional[str] = None
    initial_pool_tokens: Optional[str] = None
    freeze_resale: bool = False
    persons_file: Optional[str] = None
    trips_file: Optional[str] = None
    factors_file: Optional[str] = None
    profile_file: Optional[str] = None
    synthetic_users: int = 200
    batch_window: int = 1
    max_round_retries: int = 3
    out_dir: Optional[str] = None

    @classmethod
    def from_json(cls, text: str) -> "SimulationConfig":
        obj = json.loads(text)
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        cfg = cls(**obj)
        cfg.delays_ms = (float(cfg.delays_ms[0]), float(cfg.delays_ms[1]))
        cfg.byzantine = tuple((int(i), str(b)) for i, b in cfg.byzantine)
        return cfg

    def to_canonical_json(self) -> str:
        obj = asdict(self)
        obj["delays_ms"] = list(self.delays_ms)
        obj["byzantine"] = [list(b) for b in self.byzantine]
        obj.pop("out_dir")  # where artifacts land does not define the run
        return json.dumps(obj, sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_canonical_json().encode()).hexdigest()


@dataclass
class SimulationResult:
    config: SimulationConfig
    ledger: Ledger
    persons: list[SurveyPerson]
    trips: list[TripRecord]
    trip_costs: dict[str, tuple[float, TokenAmount]]  # trip_id -> (grams, tokens)
    grants: dict[str, TokenAmount]  # user_id -> grant
    user_addresses: dict[str, str]  # user_id -> ledger address
    cap: TokenAmount
    latencies_ms: list[float]
    submitted: int
    committed: int
    tx_per_minute: list[int]
    consensus_trace: list[TraceRow]
    equivocations: list
    rejects: list[RejectedRow]
    market: Market

    @property
    def throughput(self) -> Optional[float]:
        if self.submitted == 0:
            return None
        return self.committed / self.submitted


@dataclass
class MetricsReport:
    submitted: int
    committed: int
    throughput: Optional[float]
    latency_mean_ms: Optional[float]
    latency_std_ms: Optional[float]
    mean_tx_per_minute: float
    tx_per_minute: list[int]

    def to_json(self) -> str:
        obj = asdict(self)
        obj["note"] = ("latencies are simulated-network milliseconds; "
                       "throughput n/a when nothing was submitted")
        return json.dumps(obj, indent=2, sort_keys=True)


def collect_metrics(result: SimulationResult) -> MetricsReport:
    """Simulated-time performance figures, hardware independent."""
    lat = result.latencies_ms
    return MetricsReport(
        submitted=result.submitted,
        committed=result.committed,
        throughput=result.throughput,
        latency_mean_ms=statistics.fmean(lat) if lat else None,
        latency_std_ms=statistics.stdev(lat) if len(lat) > 1 else None,
        mean_tx_per_minute=result.committed / MINUTES_PER_DAY,
        tx_per_minute=result.tx_per_minute,
    )


def _settlement_description(trip: TripRecord) -> str:
    if trip.mode in PER_SEAT_MODES:
        vehicle = "fleet-bus"
    else:
        vehicle = f"veh-{trip.user_id}"
    return f"trip:{trip.trip_id};mode:{trip.mode.value};vehicle:{vehicle}"


class _PendingView:
    """Balance view of a ledger plus not-yet-committed batch transactions,
    so settlements built into one block see each other's effects."""

    def __init__(self, ledger: Ledger):
        self._ledger = ledger
        self._delta: dict[str, int] = {}

    def stage(self, tx: TokenTransaction) -> None:
        if tx.kind is not TxKind.ALLOCATION:
            self._delta[tx.sender] = self._delta.get(tx.sender, 0) - tx.amount.centi
        self._delta[tx.receiver] = self._delta.get(tx.receiver, 0) + tx.amount.centi

    def balance(self, address: str) -> TokenAmount:
        return TokenAmount(
            self._ledger.balances.get(address, 0) + self._delta.get(address, 0)
        )


def run(config: SimulationConfig, out_dir: Optional[str | Path] = None) -> SimulationResult:
    """Replay one simulated day; aborts export a partial ledger for autopsy."""
    out_path = Path(out_dir) if out_dir else (
        Path(config.out_dir) if config.out_dir else None
    )

    # inputs
    if config.persons_file and config.trips_file:
        persons, trips, rejects = load_population(config.persons_file, config.trips_file)
    else:
        profile = load_profile(config.profile_file)
        persons, trips = generate_synthetic(
            child_seed(config.seed, "population"), config.synthetic_users, profile
        )
        rejects = []
    if config.factors_file:
        table = EmissionFactorTable.from_csv(Path(config.factors_file).read_text())
    else:
        table = EmissionFactorTable.default()
    price = PricePolicy(config.price_cad_per_tonne)
    bus_policy = BusChargingPolicy(config.seats_per_bus, config.operator_pays_remainder)

    # per-trip costs and the day's cap
    trip_costs = {t.trip_id: trip_cost(t, table, bus_policy, price) for t in trips}
    if config.cap_mode == "explicit":
        if config.explicit_cap_tokens is None:
            raise ValueError("cap_mode=explicit needs explicit_cap_tokens")
        cap = TokenAmount.from_tokens(config.explicit_cap_tokens)
    else:
        cap = TokenAmount(sum(c.centi for _, c in trip_costs.values()))
    cap_policy = CapPolicy(cap=cap)

    # identities and genesis
    users = [NodeIdentity(p.user_id, Role.USER) for p in persons]
    validators = [NodeIdentity(f"validator-{i}", Role.ACTIVE_VALIDATOR)
                  for i in range(config.n_active_nodes)]
    identities = users + [MARKET_NODE, RETIREMENT_NODE, ISSUER_NODE, OPERATOR_NODE]
    market = Market(price, freeze_resale=config.freeze_resale)
    initial_pool = (TokenAmount.from_tokens(config.initial_pool_tokens)
                    if config.initial_pool_tokens is not None else None)
    genesis_txs = market.genesis_transactions(
        [u.address for u in users], cap_policy, initial_pool
    )
    ledger = create_genesis(identities, validators, genesis_txs)
    market.record_committed(genesis_txs)

    user_addresses = {p.user_id: u.address for p, u in zip(persons, users)}
    grants = {p.user_id: TokenAmount.zero() for p in persons}
    addr_to_user = {a: uid for uid, a in user_addresses.items()}
    for tx in genesis_txs:
        if tx.receiver in addr_to_user:
            grants[addr_to_user[tx.receiver]] = tx.amount

    # consensus
    byz = {}
    for index, behavior in config.byzantine:
        if not 0 <= index < len(validators):
            raise ValueError(f"byzantine index {index} out of range")
        byz[validators[index].address] = Behavior(behavior)
    network = NetworkModel(
        delay_ms_low=config.delays_ms[0],
        delay_ms_high=config.delays_ms[1],
        drop_probability=config.drop_probability,
        byzantine=byz,
        unsafe_faults=config.unsafe_faults,
    )
    network.check_fault_bound(config.n_active_nodes)
    engine = ConsensusEngine(
        ConsensusConfig(config.n_active_nodes, rng_seed=child_seed(config.seed, "network")),
        network,
    )

    latencies: list[float] = []
    tx_per_minute = [0] * MINUTES_PER_DAY
    submitted = 0
    committed = 0
    sim_time = 0.0

    def flush(batch: list[tuple[TokenTransaction, float]]) -> None:
        nonlocal ledger, sim_time, submitted, committed
        if not batch:
            return
        pool = [tx for tx, _ in batch]
        submit_times = {tx.tx_id: at for tx, at in batch}
        submitted += len(pool)
        start = max(sim_time, max(submit_times.values()))
        result, ledger, sim_time = engine.run_until_commit(
            pool, ledger, start, max_retries=config.max_round_retries
        )
        if result is None:
            return
        committed += len(pool)
        market.record_committed(pool)
        for tx in pool:
            latencies.append((result.commit_time - submit_times[tx.tx_id]) * 1000.0)
            minute = min(MINUTES_PER_DAY - 1, max(0, int(result.commit_time // 60)))
            tx_per_minute[minute] += 1

    try:
        batch: list[tuple[TokenTransaction, float]] = []
        view = _PendingView(ledger)
        for trip in sorted(trips, key=lambda t: (t.end_time, t.trip_id)):
            _, cost = trip_costs[trip.trip_id]
            txs = market.settle_trip(
                user_addresses[trip.user_id], cost, view,
                now=trip.end_time, description=_settlement_description(trip),
            )
            if config.operator_pays_remainder and trip.mode in PER_SEAT_MODES:
                op_tx = market.operator_settlement(
                    trip, float(trip.passengers), bus_policy, table, view,
                    now=trip.end_time + 0.002,
                )
                if op_tx is not None:
                    txs.append(op_tx)
            if not txs:
                continue
            for tx in txs:
                view.stage(tx)
            batch.extend((tx, trip.end_time) for tx in txs)
            if len(batch) >= config.batch_window:
                flush(batch)
                batch = []
                view = _PendingView(ledger)
        flush(batch)
    except Exception:
        if out_path is not None:
            out_path.mkdir(parents=True, exist_ok=True)
            (out_path / "ledger.partial.ndjson").write_text(export_chain(ledger))
        raise

    result = SimulationResult(
        config=config,
        ledger=ledger,
        persons=persons,
        trips=trips,
        trip_costs=trip_costs,
        grants=grants,
        user_addresses=user_addresses,
        cap=cap,
        latencies_ms=latencies,
        submitted=submitted,
        committed=committed,
        tx_per_minute=tx_per_minute,
        consensus_trace=engine.trace,
        equivocations=engine.equivocations,
        rejects=rejects,
        market=market,
    )
    if out_path is not None:
        write_artifacts(result, out_path)
    return result


def write_artifacts(result: SimulationResult, out_dir: str | Path) -> None:
    """Ledger export, wallet snapshot, metrics, trace, manifest, population."""
    out = Path(out_dir)
    (out / "population").mkdir(parents=True, exist_ok=True)
    (out / "ledger.ndjson").write_text(export_chain(result.ledger))
    (out / "wallets.csv").write_text(export_wallets(result.ledger))
    (out / "metrics.json").write_text(collect_metrics(result).to_json() + "\n")
    (out / "consensus_trace.csv").write_text(export_trace(result.consensus_trace))
    write_population(result.persons, result.trips,
                     out / "population" / "persons.csv",
                     out / "population" / "trips.csv")
    (out / "run_config.json").write_text(result.config.to_canonical_json() + "\n")
    if result.rejects:
        lines = ["file,row,column,reason"]
        for r in result.rejects:
            reason = r.reason.replace('"', "'")
            lines.append(f'{r.file},{r.row},{r.column},"{reason}"')
        (out / "rejects.csv").write_text("\n".join(lines) + "\n")
    manifest = {
        "seed": result.config.seed,
        "config_hash": result.config.config_hash(),
        "ledger_head": result.ledger.head.block_hash,
        "hash_algorithm": HASH_ALGORITHM,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
