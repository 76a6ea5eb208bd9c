"""Cap-and-trade mechanics.

The day's cap is the token sum of all person-trip costs.  Every user gets
an equal grant at genesis (largest-remainder reconciliation keeps the sum
exact).  Trip payments retire tokens into a non-recirculating retirement
account; a user short of tokens automatically buys the shortfall from the
market pool at the fixed price before paying.  Sales flow back into the
pool at par.  Fiat totals are bookkeeping only and never touch the chain.
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import Decimal
from typing import Optional, Sequence

from .emissions import (
    BusChargingPolicy,
    EmissionFactorTable,
    PricePolicy,
    TripRecord,
    PER_SEAT_MODES,
    trip_cost,
)
from .ledger import Ledger, NodeIdentity, Role, TokenTransaction, TxKind, make_transaction
from .tokens import TokenAmount, total

# a trip payment is booked this long after its bundled purchase so the
# purchase always sorts first inside a block
SETTLEMENT_EPSILON_S = 0.001


class MarketError(Exception):
    pass


class EmptyPopulation(MarketError):
    pass


class InsufficientTokens(MarketError):
    pass


class MarketPoolExhausted(MarketError):
    pass


@dataclass(frozen=True)
class CapPolicy:
    cap: TokenAmount
    allocation: str = "equal_split"
    reduction_rate: float = 0.0

    def __post_init__(self):
        if self.cap.centi < 0:
            raise ValueError("cap must be non-negative")
        if not (0 <= self.reduction_rate < 1):
            raise ValueError("reduction_rate must be in [0, 1)")


def compute_cap(trips: Sequence[TripRecord], table: EmissionFactorTable,
                bus_policy: BusChargingPolicy, price: PricePolicy) -> CapPolicy:
    """Cap = token sum of every person-trip inside the system boundary."""
    cap = total(trip_cost(t, table, bus_policy, price)[1] for t in trips)
    return CapPolicy(cap=cap)


def equal_split_grants(cap: TokenAmount, n_users: int) -> list[TokenAmount]:
    """Largest-remainder equal split; grants sum to the cap exactly."""
    if n_users < 1:
        raise EmptyPopulation("no users to allocate to")
    base, rem = divmod(cap.centi, n_users)
    return [TokenAmount(base + (1 if i < rem else 0)) for i in range(n_users)]


def allocate(user_addresses: Sequence[str], policy: CapPolicy,
             market_address: str, timestamp: float = 0.0) -> list[TokenTransaction]:
    """One allocation transaction per user from the market address."""
    if not user_addresses:
        raise EmptyPopulation("no users to allocate to")
    grants = equal_split_grants(policy.cap, len(user_addresses))
    txs = []
    for addr, grant in zip(user_addresses, grants):
        if grant.centi == 0:
            continue
        txs.append(make_transaction(
            timestamp, market_address, addr, grant, TxKind.ALLOCATION,
            description="daily grant",
        ))
    return txs


MARKET_NODE = NodeIdentity("market", Role.MARKET, {"purpose": "token pool"})
RETIREMENT_NODE = NodeIdentity("retirement", Role.MARKET,
                               {"purpose": "retired trip payments"})
ISSUER_NODE = NodeIdentity("issuer", Role.MARKET, {"purpose": "genesis issuance"})
OPERATOR_NODE = NodeIdentity("transit-operator", Role.OPERATOR, {})


class Market:
    """Fixed-price counterparty: sells to cover deficits, buys surpluses.

    Pool state is a view of the market wallet on the ledger; the fiat side
    and the resale counters advance only in `record_committed`, so every
    pool change is backed by a committed transaction.
    """

    def __init__(self, price: PricePolicy, freeze_resale: bool = False):
        self.price = price
        self.freeze_resale = freeze_resale
        self.address = MARKET_NODE.address
        self.retirement_address = RETIREMENT_NODE.address
        self.issuer_address = ISSUER_NODE.address
        self.purchases_cad = Decimal(0)
        self.sales_cad = Decimal(0)
        self.purchased = TokenAmount.zero()
        self.sold = TokenAmount.zero()
        self.retired = TokenAmount.zero()

    # -- genesis --

    def genesis_transactions(self, user_addresses: Sequence[str], policy: CapPolicy,
                             initial_pool: Optional[TokenAmount] = None
                             ) -> list[TokenTransaction]:
        """User grants plus the market pool reserve, all at time zero.

        The pool reserve defaults to the cap itself, which bounds any day's
        total deficit purchases, and is issued to the market wallet so the
        whole money supply is on-chain.
        """
        txs = allocate(user_addresses, policy, self.address)
        pool = policy.cap if initial_pool is None else initial_pool
        if pool.centi > 0:
            txs.append(make_transaction(
                0.0, self.issuer_address, self.address, pool, TxKind.ALLOCATION,
                description="market pool reserve",
            ))
        return txs

    # -- pool view --

    def pool(self, ledger: Ledger) -> TokenAmount:
        return ledger.balance(self.address)

    def available_for_sale(self, ledger: Ledger) -> TokenAmount:
        """Sellable pool; with resale frozen, bought-back tokens stay locked."""
        balance = self.pool(ledger)
        if self.freeze_resale:
            return balance - self.sold
        return balance

    # -- operations --

    def settle_trip(self, user_address: str, cost: TokenAmount, ledger: Ledger,
                    now: float, description: str = "") -> list[TokenTransaction]:
        """Payment for a finished trip, with an automatic purchase of any
        shortfall; zero-cost trips settle with no transaction at all."""
        if cost.centi < 0:
            raise ValueError("cost must be non-negative")
        if cost.centi == 0:
            return []
        txs = []
        balance = ledger.balance(user_address)
        if balance < cost:
            shortfall = cost - balance
            if self.available_for_sale(ledger) < shortfall:
                raise MarketPoolExhausted(
                    f"pool {self.available_for_sale(ledger)} cannot cover {shortfall}"
                )
            txs.append(make_transaction(
                now, self.address, user_address, shortfall, TxKind.PURCHASE,
                description=description or "deficit purchase",
            ))
        txs.append(make_transaction(
            now + SETTLEMENT_EPSILON_S, user_address, self.retirement_address,
            cost, TxKind.TRIP_PAYMENT, description=description or "trip:unknown",
        ))
        return txs

    def sell_surplus(self, user_address: str, amount: TokenAmount, ledger: Ledger,
                     now: float) -> TokenTransaction:
        """Sell tokens back to the pool at par."""
        if amount.centi <= 0:
            raise ValueError("sale amount must be positive")
        if ledger.balance(user_address) < amount:
            raise InsufficientTokens(
                f"balance {ledger.balance(user_address)} < {amount}"
            )
        return make_transaction(now, user_address, self.address, amount,
                                TxKind.SALE, description="surplus sale")

    def operator_settlement(self, trip: TripRecord, occupied_seats: float,
                            bus_policy: BusChargingPolicy,
                            table: EmissionFactorTable, ledger: Ledger,
                            now: float) -> Optional[TokenTransaction]:
        """Charge the operator for empty bus seats, when the policy says so.

        The tokens are drawn from the market pool straight into retirement;
        the operator's side is settled in fiat bookkeeping.
        """
        if not bus_policy.operator_pays_remainder or trip.mode not in PER_SEAT_MODES:
            return None
        remainder = max(0.0, bus_policy.seats_per_bus - occupied_seats)
        if remainder == 0.0:
            return None
        _, per_seat = trip_cost(trip, table, bus_policy, self.price)
        centi = round(per_seat.centi * remainder)
        if centi <= 0:
            return None
        amount = TokenAmount(centi)
        if self.available_for_sale(ledger) < amount:
            raise MarketPoolExhausted(f"pool cannot cover operator remainder {amount}")
        return make_transaction(
            now, self.address, self.retirement_address, amount,
            TxKind.OPERATOR_SETTLEMENT,
            description=f"trip:{trip.trip_id};operator:{OPERATOR_NODE.node_id};"
                        f"seats:{remainder:.2f}",
        )

    # -- bookkeeping --

    def record_committed(self, txs: Sequence[TokenTransaction]) -> None:
        for tx in txs:
            if tx.kind is TxKind.PURCHASE and tx.sender == self.address:
                self.purchased = self.purchased + tx.amount
                self.purchases_cad += tx.amount.to_cad()
            elif tx.kind is TxKind.SALE and tx.receiver == self.address:
                self.sold = self.sold + tx.amount
                self.sales_cad += tx.amount.to_cad()
            elif tx.receiver == self.retirement_address and tx.kind in (
                TxKind.TRIP_PAYMENT, TxKind.OPERATOR_SETTLEMENT
            ):
                self.retired = self.retired + tx.amount
