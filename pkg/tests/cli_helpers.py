"""Runs a full CLI session into a directory; shared by the CLI and acceptance tests."""
from pathlib import Path

from riskplan.cli import main


def run(*argv) -> int:
    return main([str(a) for a in argv])


def full_session(root: Path, seed: int = 7, count: int = 3) -> dict:
    """generate -> plan -> learn -> eval -> robustness -> render; returns {command: exit code}."""
    gen, pl, ln, ev, rb, rd = (root / n for n in ("gen", "plan", "learn", "eval", "robust", "render"))
    codes = {
        "generate": run("generate", "--count", count, "--seed", seed, "--out", gen),
        "plan": run("plan", gen, "--out", pl),
        "learn": run("learn", gen, "--epochs", 3, "--lr", 0.05, "--perturb", 0.3, "--seed", seed, "--out", ln),
    }
    codes["eval"] = run("eval", pl, "--out", ev)
    codes["robustness"] = run("robustness", "--count", 2, "--seed", seed, "--sigmas", "0,1", "--delays", "0,500",
                              "--out", rb)
    codes["render"] = run("render", pl / "planned_0000.json", "--risk", pl / "risk_0000.rmm", "--scale", 2,
                          "--out", rd)
    return codes


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
