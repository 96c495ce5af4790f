"""Scenario files.

INI-style sections with ``key = value`` lines. Values are JSON literals
(numbers, nested lists for matrices); bare words are read as strings.
Subsystems are numbered from 1 in files and from 0 internally.

    [scenario]      steps, dt, H, N, abar, mode, network_mode, tau, strategy,
                    seed, Q, R, weights, gap_bounds, u_init, leader_horizon,
                    terminal_prefix, terminal_cone_fraction, terminal_set,
                    neighbor_tail
    [reference]     x0, u
    [channel]       q (states x links), T, links ([[sender, receiver], ...]),
                    initial
    [events]        setpoints ([[k, offset], ...]),
                    outages ([[sender, receiver, start, length], ...])
    [subsystem.i]   A, B, x0, u_bound, neighbor, gain, halfwidth

Every key except ``weights``, the channel matrices and the subsystem models
is optional; defaults are those of :class:`aoicosim.cosim.ScenarioConfig`.
"""
from __future__ import annotations

import configparser
import json
import re
from dataclasses import fields
from importlib import resources

import numpy as np

from .channel import ChannelError, LinkChain
from .cosim import ScenarioConfig, ScenarioError, SubsystemSpec

SCENARIO_KEYS = ("steps", "dt", "H", "N", "abar", "mode", "network_mode", "tau", "strategy",
                 "seed", "Q", "R", "weights", "gap_bounds", "u_init", "leader_horizon",
                 "terminal_prefix", "terminal_cone_fraction", "terminal_set",
                 "neighbor_tail")
SECTION_KEYS = {
    "scenario": SCENARIO_KEYS,
    "reference": ("x0", "u"),
    "channel": ("q", "T", "links", "initial"),
    "events": ("setpoints", "outages"),
}
SUBSYSTEM_KEYS = ("A", "B", "x0", "u_bound", "neighbor", "gain", "halfwidth")
REQUIRED = {"scenario": ("weights",), "channel": ("q", "T", "links"),
            "subsystem": ("A", "B", "x0", "u_bound")}
INT_KEYS = {"steps", "H", "N", "abar", "seed", "leader_horizon", "terminal_prefix", "initial",
            "neighbor"}


class ConfigError(ValueError):
    def __init__(self, message, key=None, line=None, source="<config>"):
        self.message, self.key, self.line, self.source = message, key, line, source
        where = source if line is None else f"{source}:{line}"
        super().__init__(f"{where}: {message}" + (f" (key {key!r})" if key else ""))


def _line_map(text: str) -> dict:
    """(section, key) -> 1-based line number; sections map under key None."""
    out, section = {}, None
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        m = re.match(r"^\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            out[(section, None)] = no
            continue
        m = re.match(r"^([^=:#;\s][^=:]*?)\s*[=:]", line)
        if m and section is not None:
            out[(section, m.group(1).strip())] = no
    return out


def _value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw.strip()


def parse_config_text(text: str, source: str = "<config>") -> ScenarioConfig:
    lines = _line_map(text)
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"malformed file: {exc}", line=getattr(exc, "lineno", None),
                          source=source) from None

    def err(msg, section, key=None):
        return ConfigError(msg, key, lines.get((section, key), lines.get((section, None))),
                           source)

    data, subs = {}, {}
    for section in parser.sections():
        if section.startswith("subsystem."):
            try:
                idx = int(section.split(".", 1)[1])
            except ValueError:
                raise err("subsystem sections are named subsystem.<number>", section) from None
            allowed = SUBSYSTEM_KEYS
            target = subs.setdefault(idx, {})
        elif section in SECTION_KEYS:
            allowed = SECTION_KEYS[section]
            target = data.setdefault(section, {})
        else:
            raise err(f"unknown section [{section}]", section)
        for key, raw in parser.items(section):
            if key not in allowed:
                raise err(f"unknown key {key!r}", section, key)
            val = _value(raw)
            if key in INT_KEYS and val is not None:
                if isinstance(val, bool) or not float(val).is_integer():
                    raise err("expected an integer", section, key)
                val = int(val)
            target[key] = (val, section)

    if not subs:
        raise ConfigError("missing required key: subsystems", "subsystems", None, source)
    for sec, keys in REQUIRED.items():
        if sec == "subsystem":
            continue
        for key in keys:
            if key not in data.get(sec, {}):
                raise ConfigError(f"missing required key: {key}", key,
                                  lines.get((sec, None)), source)

    order = sorted(subs)
    if order != list(range(1, len(order) + 1)):
        raise ConfigError("subsystems must be numbered 1..n", "subsystems", None, source)
    specs = []
    for idx in order:
        d = subs[idx]
        sec = f"subsystem.{idx}"
        for key in REQUIRED["subsystem"]:
            if key not in d:
                raise err(f"missing required key: {key}", sec)
        get = lambda key, default=None: d[key][0] if key in d else default
        try:
            A = np.array(get("A"), dtype=float)
            B = np.array(get("B"), dtype=float).reshape(A.shape[0], -1)
            x0 = np.array(get("x0"), dtype=float)
        except (ValueError, TypeError) as exc:
            raise err(f"bad matrix: {exc}", sec) from None
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise err("A must be square", sec, "A")
        if x0.shape != (A.shape[0],):
            raise err("x0 length must match A", sec, "x0")
        nbr = get("neighbor")
        if nbr is not None and not 1 <= nbr <= len(order):
            raise err("neighbor out of range", sec, "neighbor")
        gain = get("gain")
        specs.append(SubsystemSpec(A, B, x0, float(get("u_bound")),
                                   None if nbr is None else nbr - 1,
                                   None if gain is None else np.atleast_2d(
                                       np.array(gain, dtype=float)),
                                   float(get("halfwidth", 0.0))))

    ch = data["channel"]
    try:
        LinkChain(np.array(ch["q"][0], dtype=float), np.array(ch["T"][0], dtype=float),
                  int(ch.get("initial", (0,))[0]))
    except ChannelError as exc:
        key = "T" if "transition" in str(exc) else ("initial" if "initial" in str(exc)
                                                     else "q")
        raise err(str(exc), "channel", key) from None
    except (ValueError, TypeError) as exc:
        raise err(f"bad matrix: {exc}", "channel") from None
    q = np.atleast_2d(np.array(ch["q"][0], dtype=float))
    links = [tuple(int(x) - 1 for x in lk) for lk in ch["links"][0]]
    if len(links) != q.shape[1]:
        raise err("one link per column of q", "channel", "links")
    n = len(specs)
    if any(not (0 <= s < n and 0 <= r < n) for s, r in links):
        raise err("link endpoint out of range", "channel", "links")

    kw = {"chain_init": int(ch.get("initial", (0,))[0])}
    for key, (val, _) in data.get("scenario", {}).items():
        kw[key] = val
    if "Q" in kw:
        kw["Q"] = np.array(kw["Q"], dtype=float)
    if "gap_bounds" in kw:
        kw["gap_bounds"] = tuple(float(x) for x in kw["gap_bounds"])
    ref = data.get("reference", {})
    if "x0" in ref:
        kw["ref_x0"] = np.array(ref["x0"][0], dtype=float)
    if "u" in ref:
        kw["ref_u"] = float(ref["u"][0])
    ev = data.get("events", {})
    if "setpoints" in ev:
        kw["setpoints"] = [(int(k), float(off)) for k, off in ev["setpoints"][0]]
    if "outages" in ev:
        kw["outages"] = [(int(s) - 1, int(r) - 1, int(t), int(ln))
                         for s, r, t, ln in ev["outages"][0]]
    try:
        cfg = ScenarioConfig(specs, kw.pop("weights"), q, np.array(ch["T"][0], dtype=float),
                             links, **kw)
        validate(cfg)
    except ScenarioError as exc:
        key = getattr(exc, "key", None)
        raise err(str(exc), "scenario", key) from None
    return cfg


def validate(cfg: ScenarioConfig):
    """Invariants beyond those checked on construction."""
    if cfg.steps < cfg.H:
        raise _keyed("run length must be at least the horizon", "steps")
    if cfg.N < 1:
        raise _keyed("network horizon must be at least 1", "N")
    w = np.asarray(cfg.weights)
    if np.any(w < 0):
        raise _keyed("weights must be nonnegative", "weights")
    if not 0.0 <= cfg.tau < 1.0:
        raise _keyed("tau must lie in [0, 1)", "tau")
    if cfg.network_mode not in ("robust", "stochastic"):
        raise _keyed(f"unknown network mode {cfg.network_mode!r}", "network_mode")
    if cfg.strategy not in ("commit", "greedy"):
        raise _keyed(f"unknown strategy {cfg.strategy!r}", "strategy")
    for i, s in enumerate(cfg.subsystems[1:], start=1):
        if s.neighbor is None:
            raise _keyed(f"subsystem {i + 1} needs a neighbor", "neighbor")
        if s.gain is None:
            raise _keyed(f"subsystem {i + 1} needs a terminal gain", "gain")


def _keyed(msg, key):
    return ScenarioError(msg, key)


def parse_config(path) -> ScenarioConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read file: {exc.strerror}", source=str(path)) from None
    return parse_config_text(text, str(path))


def load_preset(name: str) -> ScenarioConfig:
    if name != "platoon":
        raise ConfigError(f"unknown preset {name!r}")
    text = resources.files("aoicosim").joinpath("data/platoon.cfg").read_text("utf-8")
    return parse_config_text(text, "platoon.cfg")


def _fmt(x) -> str:
    if isinstance(x, np.ndarray):
        x = x.tolist()
    if isinstance(x, tuple):
        x = list(x)
    return json.dumps(x) if not isinstance(x, str) else x


def serialize_config(cfg: ScenarioConfig) -> str:
    """Text that :func:`parse_config_text` maps back to an equal configuration."""
    out = ["[scenario]"]
    for key in SCENARIO_KEYS:
        val = getattr(cfg, key)
        out.append(f"{key} = {_fmt(val)}")
    out += ["", "[reference]", f"x0 = {_fmt(cfg.ref_x0)}", f"u = {_fmt(cfg.ref_u)}"]
    out += ["", "[channel]", f"q = {_fmt(cfg.chain_q)}", f"T = {_fmt(cfg.chain_T)}",
            f"links = {_fmt([[s + 1, r + 1] for s, r in cfg.links])}",
            f"initial = {cfg.chain_init}"]
    out += ["", "[events]",
            f"setpoints = {_fmt([[k, off] for k, off in cfg.setpoints])}",
            f"outages = {_fmt([[s + 1, r + 1, t, ln] for s, r, t, ln in cfg.outages])}"]
    for i, s in enumerate(cfg.subsystems, start=1):
        out += ["", f"[subsystem.{i}]", f"A = {_fmt(s.A)}", f"B = {_fmt(s.B)}",
                f"x0 = {_fmt(s.x0)}", f"u_bound = {_fmt(s.u_bound)}"]
        if s.neighbor is not None:
            out.append(f"neighbor = {s.neighbor + 1}")
        if s.gain is not None:
            out.append(f"gain = {_fmt(s.gain)}")
        out.append(f"halfwidth = {_fmt(s.halfwidth)}")
    return "\n".join(out) + "\n"


def config_to_dict(cfg: ScenarioConfig) -> dict:
    """Plain nested lists/scalars, for comparisons."""
    def plain(x):
        if isinstance(x, np.ndarray):
            return x.tolist()
        if isinstance(x, (list, tuple)):
            return [plain(v) for v in x]
        if isinstance(x, SubsystemSpec):
            return {f.name: plain(getattr(x, f.name)) for f in fields(SubsystemSpec)}
        if isinstance(x, np.generic):
            return x.item()
        return x
    return {f.name: plain(getattr(cfg, f.name)) for f in fields(ScenarioConfig)}
