"""Network topology: devices, terminals and nets.

Terminals get global indices in device-insertion order, then local order,
so the same construction sequence always yields the same matrices.
"""

from __future__ import annotations

import copy
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .devices import Device, ValidationError


class NetworkWarning(UserWarning):
    pass


@dataclass
class Terminal:
    global_index: int
    device_id: int
    local_index: int
    net_id: str | None = None


@dataclass
class Net:
    net_id: str
    members: list[int] = field(default_factory=list)


class Network:
    """A mutable builder for a power network.

    >>> net = Network()
    >>> g = net.add_device(GenericGenerator(alpha=0.02, beta=30, p_max=1000), "gen")
    >>> l = net.add_device(FixedLoad(p_fix=50), "load")
    >>> net.connect("gen", "load", net="bus")
    'bus'
    """

    def __init__(self, T: int = 1, h: float = 1.0, probabilities=None, name: str | None = None):
        if int(T) != T or T < 1:
            raise ValidationError("T: horizon must be a positive integer")
        if not h > 0:
            raise ValidationError("h: period length must be positive")
        probs = np.array([1.0] if probabilities is None else probabilities, dtype=float)
        if probs.ndim != 1 or probs.size < 1 or np.any(probs < 0):
            raise ValidationError("probabilities: need a nonempty vector of nonnegative values")
        if abs(probs.sum() - 1.0) > 1e-12:
            raise ValidationError(f"probabilities: must sum to 1 (got {probs.sum():.15g})")
        self.T = int(T)
        self.h = float(h)
        self.probabilities = probs
        self.name = name
        self.devices: list[Device] = []
        self.device_names: list[str] = []
        self.terminals: list[Terminal] = []
        self.nets: list[Net] = []
        self._device_terms: list[list[int]] = []

    # ------------------------------------------------------------------
    @property
    def S(self) -> int:
        return self.probabilities.size

    @property
    def M(self) -> int:
        return len(self.terminals)

    @property
    def N(self) -> int:
        return len(self.nets)

    @property
    def net_names(self) -> list[str]:
        return [n.net_id for n in self.nets]

    def add_device(self, spec: Device, name: str | None = None) -> int:
        """Register ``spec``; returns its device id.  Terminals start unwired."""
        if not isinstance(spec, Device):
            raise TypeError(f"expected a Device, got {type(spec).__name__}")
        d = len(self.devices)
        name = name or f"{spec.kind}{d}"
        if name in self.device_names:
            raise ValidationError(f"name: duplicate device name '{name}'")
        errs = spec.errors(self.T, self.S)
        if errs:
            raise ValidationError(errs, f"{name} ({spec.kind})")
        self.devices.append(spec)
        self.device_names.append(name)
        idx = []
        for k in range(spec.n_terminals):
            t = Terminal(len(self.terminals), d, k)
            self.terminals.append(t)
            idx.append(t.global_index)
        self._device_terms.append(idx)
        return d

    def device_id(self, ref) -> int:
        if isinstance(ref, (int, np.integer)):
            if not 0 <= ref < len(self.devices):
                raise KeyError(f"no device with id {ref}")
            return int(ref)
        try:
            return self.device_names.index(ref)
        except ValueError:
            raise KeyError(f"no device named '{ref}'") from None

    def device(self, ref) -> Device:
        return self.devices[self.device_id(ref)]

    def device_terminals(self, ref) -> list[int]:
        return list(self._device_terms[self.device_id(ref)])

    def terminal(self, device, k: int = 0) -> Terminal:
        d = self.device_id(device)
        terms = self._device_terms[d]
        if not 0 <= k < len(terms):
            raise KeyError(f"device '{self.device_names[d]}' has no terminal {k}")
        return self.terminals[terms[k]]

    def _resolve(self, ref) -> Terminal:
        if isinstance(ref, Terminal):
            return self.terminals[ref.global_index]
        if isinstance(ref, tuple):
            return self.terminal(*ref)
        if isinstance(ref, str):
            if ref in self.device_names:
                d = self.device_id(ref)
                if len(self._device_terms[d]) != 1:
                    raise ValidationError(f"'{ref}' has several terminals; write '{ref}.k'")
                return self.terminal(d, 0)
            name, _, k = ref.rpartition(".")
            if name and k.isdigit():
                return self.terminal(name, int(k))
            raise KeyError(f"unknown terminal '{ref}'")
        if isinstance(ref, (int, np.integer)):
            return self.terminals[int(ref)]
        raise TypeError(f"cannot interpret {ref!r} as a terminal")

    def add_net(self, name: str | None = None) -> str:
        name = name or f"net{len(self.nets)}"
        if name in self.net_names:
            raise ValidationError(f"net: duplicate net name '{name}'")
        self.nets.append(Net(name))
        return name

    def connect(self, *terminals, net: str | None = None) -> str:
        """Wire terminals into ``net`` (created if it does not exist)."""
        resolved = [self._resolve(t) for t in terminals]
        if net is None or net not in self.net_names:
            net = self.add_net(net)
        target = self.nets[self.net_names.index(net)]
        seen = set()
        for t in resolved:
            if t.net_id is not None or t.global_index in seen:
                other = t.net_id or net
                raise ValidationError(
                    f"terminal {self.terminal_label(t.global_index)} already wired to net '{other}'; "
                    f"cannot also join net '{net}'"
                )
            seen.add(t.global_index)
        for t in resolved:
            t.net_id = net
            target.members.append(t.global_index)
        return net

    def terminal_label(self, m: int) -> str:
        t = self.terminals[m]
        return f"{self.device_names[t.device_id]}[{t.local_index}]"

    # ------------------------------------------------------------------
    def validate(self) -> None:
        errs = []
        unwired = [self.terminal_label(t.global_index) for t in self.terminals if t.net_id is None]
        if unwired:
            errs.append("unwired terminals: " + ", ".join(unwired))
        for n in self.nets:
            if not n.members:
                errs.append(f"net '{n.net_id}' has no terminals")
            elif len(n.members) == 1:
                warnings.warn(
                    f"net '{n.net_id}' has a single terminal; its power is forced to zero",
                    NetworkWarning,
                    stacklevel=2,
                )
        for name, dev in zip(self.device_names, self.devices):
            errs.extend(f"{name}.{e}" for e in dev.errors(self.T, self.S))
        if errs:
            raise ValidationError(errs, "network")

    def adjacency(self):
        """Return ``(A, [B_d])``: net incidence (N x M) and per-device selectors."""
        unwired = [self.terminal_label(t.global_index) for t in self.terminals if t.net_id is None]
        if unwired:
            raise ValidationError("unwired terminals: " + ", ".join(unwired), "network")
        M = self.M
        rows, cols = [], []
        for i, n in enumerate(self.nets):
            rows.extend([i] * len(n.members))
            cols.extend(n.members)
        A = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(self.N, M))
        B = []
        for terms in self._device_terms:
            k = len(terms)
            B.append(sp.csr_matrix((np.ones(k), (np.arange(k), terms)), shape=(k, M)))
        return A, B

    def net_of_terminals(self) -> np.ndarray:
        """Net index of every terminal (``-1`` if unwired)."""
        names = {n: i for i, n in enumerate(self.net_names)}
        return np.array([names.get(t.net_id, -1) for t in self.terminals], dtype=int)

    # ------------------------------------------------------------------
    def with_devices(self, devices=None, T: int | None = None, h: float | None = None,
                     probabilities=None) -> "Network":
        """Copy with the same wiring but replaced devices / horizon / scenarios."""
        new = copy.copy(self)
        new.T = self.T if T is None else int(T)
        new.h = self.h if h is None else float(h)
        new.probabilities = (
            self.probabilities.copy() if probabilities is None else np.asarray(probabilities, float)
        )
        new.devices = list(self.devices if devices is None else devices)
        if len(new.devices) != len(self.devices):
            raise ValueError("device count must not change")
        for old, d in zip(self.devices, new.devices):
            if old.n_terminals != d.n_terminals:
                raise ValueError("replacement device has a different terminal count")
        new.device_names = list(self.device_names)
        new.terminals = [copy.copy(t) for t in self.terminals]
        new.nets = [Net(n.net_id, list(n.members)) for n in self.nets]
        new._device_terms = [list(t) for t in self._device_terms]
        return new

    def __repr__(self):
        return (
            f"Network(T={self.T}, h={self.h}, S={self.S}, devices={len(self.devices)}, "
            f"terminals={self.M}, nets={self.N})"
        )
