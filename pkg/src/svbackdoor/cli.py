"""Command-line driver. Every stage reads and writes artifacts inside one run directory.

Exit codes: 0 success, 1 trigger synthesis failure, 2 invalid input or config,
3 an upstream artifact is missing.
"""

from __future__ import annotations

import argparse
import filecmp
import json
import logging
import shutil
import sys
import tempfile
from dataclasses import replace
from itertools import product
from pathlib import Path
from typing import Callable, Sequence

import jsonschema
import numpy as np

from svbackdoor import attack, defense, dsp, metrics, svnet
from svbackdoor.attack import TriggerBundle
from svbackdoor.corpus import OOD, PUBLIC, LabeledDataset, read_dataset, read_wav, write_dataset, write_wav
from svbackdoor.errors import StageDependencyError, SynthesisFailure
from svbackdoor.experiment import (
    ExperimentConfig,
    FeatureCache,
    attack_waveform,
    build_corpus,
    evaluate_ood,
    make_trigger,
    pca2d,
    poison_config,
    run_experiment,
    stage_seed,
)
from svbackdoor.verification import enroll, load_records, save_records, split_enrollment

log = logging.getLogger("svbackdoor")

CORPUS = "corpus/manifest.jsonl"
POISONED = "poisoned/manifest.jsonl"
TRIGGER_CLEAN = "trigger_clean.wav"
TRIGGER_POISON = "trigger_poison.wav"
TRIGGER_META = "trigger.json"
MODELS = ("surrogate", "benign", "poisoned")
DEFAULT_POISON_GRID = (0.01, 0.03, 0.05, 0.08, 0.10, 0.15)


class Run:
    """A run directory bound to one config. Artifacts are write-once."""

    def __init__(self, cfg: ExperimentConfig, root: Path):
        self.cfg, self.root = cfg, root
        self.hash = metrics.config_hash(cfg.hashable())
        self.cache = FeatureCache()
        root.mkdir(parents=True, exist_ok=True)
        self.publish({"config.json": json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n"})

    def path(self, rel: str) -> Path:
        return self.root / rel

    def need(self, rel: str, stage: str) -> Path:
        p = self.root / rel
        if not p.exists():
            raise StageDependencyError(f"missing artifact {p}; run `svbackdoor {stage}` on this run directory first")
        return p

    def stamp(self, payload: dict) -> dict:
        return {"config_hash": self.hash, "master_seed": self.cfg.master_seed, **payload}

    def publish(self, files: dict[str, str | bytes] | None = None, build: Callable[[Path], None] | None = None) -> None:
        """Write into a scratch directory, then move into place.

        An existing file with identical bytes is left alone (stages are idempotent);
        differing content is refused so earlier artifacts are never overwritten.
        """
        with tempfile.TemporaryDirectory(dir=self.root, prefix=".stage-") as tmp:
            tmp = Path(tmp)
            for rel, content in (files or {}).items():
                (tmp / rel).parent.mkdir(parents=True, exist_ok=True)
                if isinstance(content, bytes):
                    (tmp / rel).write_bytes(content)
                else:
                    (tmp / rel).write_text(content)
            if build is not None:
                build(tmp)
            staged = sorted(p for p in tmp.rglob("*") if p.is_file())
            for src in staged:
                dst = self.root / src.relative_to(tmp)
                if dst.exists() and not filecmp.cmp(src, dst, shallow=False):
                    raise ValueError(f"{dst} exists with different content; use a fresh --out directory")
            for src in staged:
                dst = self.root / src.relative_to(tmp)
                if not dst.exists():
                    dst.parent.mkdir(parents=True, exist_ok=True)
                    shutil.move(str(src), dst)

    def json_file(self, rel: str, payload: dict) -> None:
        self.publish({rel: json.dumps(self.stamp(payload), indent=1, sort_keys=True) + "\n"})

    # -- loaders --

    def corpus(self) -> tuple[LabeledDataset, LabeledDataset]:
        ds = read_dataset(self.need(CORPUS, "gen"))
        by_tag = lambda tag: [s for s in ds.speaker_ids if ds.partition[s] == tag]
        return ds.subset(by_tag(PUBLIC)), ds.subset(by_tag(OOD))

    def poisoned(self) -> LabeledDataset:
        return read_dataset(self.need(POISONED, "poison"))

    def model(self, name: str) -> svnet.EncoderParams:
        return svnet.load_params(self.need(f"{name}.params", f"train --model {name}"))


def _dumps_lines(values: Sequence[float], key: str) -> str:
    return "".join(json.dumps({"step": i, key: float(v)}) + "\n" for i, v in enumerate(values))


def _csv_text(header: Sequence[str], rows) -> str:
    lines = [",".join(header)]
    lines += [",".join(str(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


# -- stages ----------------------------------------------------------------


def cmd_gen(run: Run, args) -> None:
    public, ood = build_corpus(run.cfg)
    merged = LabeledDataset(public.utterances + ood.utterances, {**public.partition, **ood.partition})
    run.publish(build=lambda tmp: write_dataset(merged, tmp / "corpus"))
    log.info("corpus: %d public and %d OOD speakers", len(public.speaker_ids), len(ood.speaker_ids))


def cmd_train(run: Run, args) -> None:
    name = args.model
    data = run.poisoned() if name == "poisoned" else run.corpus()[0]
    stage = "surrogate" if name == "surrogate" else "victim"
    tc = replace(run.cfg.train, seed=stage_seed(run.cfg.master_seed, stage))
    trace: list[float] = []
    params = svnet.train(data, tc, feats=run.cache.dataset(data), loss_trace=trace)

    def build(tmp: Path) -> None:
        svnet.save_params(params, tmp / f"{name}.params")

    run.publish({f"{name}_loss.jsonl": _dumps_lines(trace, "loss")}, build=build)
    log.info("trained %s model: final loss %.4f", name, trace[-1] if trace else float("nan"))


def cmd_derive(run: Run, args) -> None:
    public, _ = run.corpus()
    surrogate = run.model("surrogate")
    bundle = make_trigger(run.cfg, surrogate, public, run.cache)
    centroids = attack.compute_centroids(surrogate, public, run.cache.dataset(public))
    mat = np.array([c.values for c in centroids.values()])
    meta = run.stamp(
        {
            "target_embedding": bundle.target_embedding.tolist(),
            "final_similarity": bundle.final_similarity,
            "synthesis_steps": bundle.synthesis_steps,
            "objective": attack.backdoor_objective(bundle.target_embedding, mat),
            "n_centroids": len(centroids),
            "channel": None if bundle.channel is None else bundle.channel.to_dict(),
        }
    )

    def build(tmp: Path) -> None:
        write_wav(bundle.clean_trigger, tmp / TRIGGER_CLEAN)
        write_wav(bundle.poisoning_trigger, tmp / TRIGGER_POISON)

    run.publish(
        {
            TRIGGER_META: json.dumps(meta, indent=1, sort_keys=True) + "\n",
            "synthesis_trace.jsonl": _dumps_lines(bundle.trace, "objective"),
        },
        build=build,
    )
    log.info("trigger similarity %.4f after %d steps", bundle.final_similarity, bundle.synthesis_steps)


def _load_bundle(run: Run) -> TriggerBundle:
    meta = json.loads(run.need(TRIGGER_META, "derive").read_text())
    channel = meta.get("channel")
    return TriggerBundle(
        read_wav(run.need(TRIGGER_CLEAN, "derive")),
        read_wav(run.need(TRIGGER_POISON, "derive")),
        np.asarray(meta["target_embedding"]),
        float(meta["final_similarity"]),
        channel=None if channel is None else dsp.ChannelParams.from_dict(channel),
    )


def cmd_poison(run: Run, args) -> None:
    public, _ = run.corpus()
    bundle = _load_bundle(run)
    poisoned = attack.poison_dataset(public, bundle, poison_config(run.cfg))
    run.publish(build=lambda tmp: write_dataset(poisoned, tmp / "poisoned"))
    log.info("injected %d trigger copies", int(poisoned.poison_flags.sum()))


def cmd_enroll(run: Run, args) -> None:
    _, ood = run.corpus()
    params = run.model(args.model)
    seed = stage_seed(run.cfg.master_seed, "enroll")
    records = []
    for _, utts in ood.by_speaker().items():
        enrolled, _ = split_enrollment(utts, run.cfg.evaluation.m_enroll, seed)
        records.append(enroll(params, enrolled, run.cache([u.wave for u in enrolled])))

    def build(tmp: Path) -> None:
        save_records(records, tmp / f"enroll_{args.model}.json")

    run.publish(build=build)


def cmd_attack(run: Run, args) -> None:
    params = run.model(args.model)
    records = load_records(run.need(f"enroll_{args.model}.json", f"enroll --model {args.model}"))
    bundle = _load_bundle(run)
    wave = attack_waveform(run.cfg, bundle)
    rate, per = metrics.asr(params, wave, records, run.cfg.evaluation.asr_threshold)
    run.json_file(
        f"attack_{args.model}.json",
        {"asr": rate, "threshold": run.cfg.evaluation.asr_threshold, "per_speaker": {str(k): v for k, v in per.items()}},
    )
    log.info("ASR against the %s model: %.3f", args.model, rate)


def cmd_eval(run: Run, args) -> None:
    _, ood = run.corpus()
    benign, poisoned = run.model("benign"), run.model("poisoned")
    attack_res = json.loads(run.need("attack_poisoned.json", "attack --model poisoned").read_text())
    trig = json.loads(run.need(TRIGGER_META, "derive").read_text())
    seed, m = stage_seed(run.cfg.master_seed, "enroll"), run.cfg.evaluation.m_enroll
    _, s_benign = evaluate_ood(benign, ood, m, seed, run.cache)
    _, s_poison = evaluate_ood(poisoned, ood, m, seed, run.cache)
    eer_b, _ = metrics.eer(s_benign)
    eer_p, _ = metrics.eer(s_poison)
    per = {int(k): v for k, v in attack_res["per_speaker"].items()}
    extra = {"trigger_similarity": trig["final_similarity"], "synthesis_steps": trig["synthesis_steps"]}
    report = metrics.summarize(run.cfg.hashable(), run.cfg.master_seed, eer_b, eer_p, attack_res["asr"], per, extra)

    # PCA of OOD utterances plus the delivered trigger under the poisoned model
    emb = svnet.embed_batch(poisoned, run.cache.dataset(ood))
    trigger_emb = svnet.embed(poisoned, dsp.features(attack_waveform(run.cfg, _load_bundle(run))))
    coords = pca2d(np.vstack([emb, trigger_emb]))
    series = [f"speaker_{u.speaker_id}" for u in ood.utterances] + ["trigger"]
    pca_rows = ((repr(float(x)), repr(float(y)), s) for (x, y), s in zip(coords, series))

    def build(tmp: Path) -> None:
        s_benign.to_csv(tmp / "trials_benign.csv")
        s_poison.to_csv(tmp / "trials_poisoned.csv")

    run.publish(
        {
            "report.json": json.dumps(report, indent=1, sort_keys=True) + "\n",
            "plot_pca.csv": _csv_text(("x", "y", "series"), pca_rows),
        },
        build=build,
    )
    print(json.dumps({k: report[k] for k in ("eer_benign", "eer_poisoned", "asr")}))


def cmd_defend(run: Run, args) -> None:
    ds = run.poisoned()
    ids = [u.utterance_id for u in ds.utterances]
    truth = {u.utterance_id: u.poison_flag for u in ds.utterances}
    feats = run.cache.dataset(ds)

    emb = svnet.embed_batch(run.model("surrogate"), feats)
    snp = defense.sniper(emb)
    dist = defense.cosine_distances(emb, snp)
    removed = defense.clean(ids, emb, snp, run.cfg.evaluation.thd2)
    sniper_rep = defense.defense_metrics(
        [i for i, r in removed.items() if r], truth, {i: float(d) for i, d in zip(ids, dist)}
    )

    victim_emb = svnet.embed_batch(run.model("poisoned"), feats)
    flagged = defense.activation_clustering(
        ids, [u.speaker_id for u in ds.utterances], victim_emb, seed=stage_seed(run.cfg.master_seed, "defense")
    )
    ac_rep = defense.defense_metrics(flagged, truth)

    def build(tmp: Path) -> None:
        sniper_rep.write(tmp, "defense_sniper")
        ac_rep.write(tmp, "defense_ac")

    run.publish(build=build)
    for name, rep in (("sniper", sniper_rep), ("activation clustering", ac_rep)):
        log.info("%s: recall %s, FPR %.3f", name, rep.detection_recall, rep.false_positive_rate)


def cmd_channel(run: Run, args) -> None:
    clean = read_wav(run.need(TRIGGER_CLEAN, "derive"))
    params = run.cfg.poison.channel or dsp.ChannelParams()
    params = params.with_seed(stage_seed(run.cfg.master_seed, "channel"))
    stages = dsp.channel_stages(clean, params)
    summary = {
        "channel": params.to_dict(),
        "measured_snr_db": dsp.snr_db(stages["input"], stages["noisy"]),
        "distinct_levels": int(np.unique(stages["quantized"]).size),
    }

    def build(tmp: Path) -> None:
        (tmp / "channel").mkdir(exist_ok=True)
        for name, wave in stages.items():
            write_wav(wave, tmp / "channel" / f"{name}.wav")

    run.publish({"channel/channel.json": json.dumps(run.stamp(summary), indent=1, sort_keys=True) + "\n"}, build=build)


def _floats(text: str | None) -> list[float] | None:
    return None if text is None else [float(v) for v in text.split(",") if v.strip()]


def cmd_sweep(run: Run, args) -> None:
    cfg = run.cfg
    rates = _floats(args.poison_rates) or list(DEFAULT_POISON_GRID)
    speaker_rates = _floats(args.speaker_rates) or [cfg.poison.speaker_rate]
    sizes = [int(v) for v in _floats(args.public_sizes) or [cfg.corpus.public_size or 0]]
    rows = []
    cache = FeatureCache()
    for size in sizes:
        size_cfg = replace(cfg, corpus=replace(cfg.corpus, public_size=size or None))
        base = None
        for rate, spk in product(rates, speaker_rates):
            cell_cfg = replace(size_cfg, poison=replace(cfg.poison, poison_rate=rate, speaker_rate=spk))
            shared = {} if base is None else {
                "corpus": (base.public, base.ood),
                "surrogate": base.surrogate,
                "bundle": base.bundle,
                "benign_victim": base.benign_victim,
            }
            res = run_experiment(cell_cfg, cache=cache, **shared)
            base = base or res
            cell = f"sweep/cell_{len(rows):03d}"
            run.publish({f"{cell}/report.json": json.dumps(res.report, indent=1, sort_keys=True) + "\n",
                         f"{cell}/config.json": json.dumps(cell_cfg.to_dict(), indent=1, sort_keys=True) + "\n"})
            rows.append((cell, rate, spk, len(res.public.speaker_ids), res.eer_benign, res.eer_poisoned, res.asr,
                         res.report["config_hash"]))
            log.info("%s: poison %.2f speakers %.2f public %d -> ASR %.3f", cell, rate, spk, rows[-1][3], res.asr)
    header = ("cell", "poison_rate", "speaker_rate", "public_size", "eer_benign", "eer_poisoned", "asr", "config_hash")
    run.publish({"sweep/aggregate.csv": _csv_text(header, rows)})


def cmd_all(run: Run, args) -> None:
    cmd_gen(run, args)
    for name in MODELS[:1]:
        cmd_train(run, argparse.Namespace(model=name))
    cmd_derive(run, args)
    cmd_poison(run, args)
    for name in MODELS[1:]:
        cmd_train(run, argparse.Namespace(model=name))
    cmd_enroll(run, argparse.Namespace(model="poisoned"))
    cmd_attack(run, argparse.Namespace(model="poisoned"))
    cmd_eval(run, args)


COMMANDS = {
    "gen": (cmd_gen, "generate the synthetic corpus and its public/OOD split"),
    "train": (cmd_train, "train the surrogate, benign victim or poisoned victim"),
    "derive": (cmd_derive, "derive the backdoor embedding and synthesize the trigger"),
    "poison": (cmd_poison, "inject trigger copies into the public training set"),
    "enroll": (cmd_enroll, "enroll every OOD speaker on a model"),
    "attack": (cmd_attack, "play the trigger against every enrolled OOD speaker"),
    "eval": (cmd_eval, "EER of both victims, the report and plot data"),
    "defend": (cmd_defend, "run the sniper and activation-clustering defenses"),
    "channel": (cmd_channel, "write every channel stage of the trigger"),
    "sweep": (cmd_sweep, "grid over poison rate, speaker rate and public-set size"),
    "all": (cmd_all, "gen through eval in one go"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="svbackdoor", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="experiment config JSON (defaults when omitted)")
        p.add_argument("--out", type=Path, help="run directory (default: <out_dir>/run-<config hash>)")
        p.add_argument("--seed-override", type=int, help="replace the config's master seed")
        if name in ("train", "enroll", "attack"):
            choices = MODELS if name == "train" else MODELS[1:]
            p.add_argument("--model", choices=choices, default="poisoned" if name != "train" else "surrogate")
        if name == "sweep":
            p.add_argument("--poison-rates", help="comma-separated, default 0.01,0.03,0.05,0.08,0.10,0.15")
            p.add_argument("--speaker-rates", help="comma-separated, default: the config value")
            p.add_argument("--public-sizes", help="comma-separated public speaker counts, default: all")
    return parser


def load_config(path: Path | None, seed_override: int | None) -> ExperimentConfig:
    if path is None:
        cfg = ExperimentConfig()
    else:
        if not path.exists():
            raise StageDependencyError(f"config file {path} not found")
        cfg = ExperimentConfig.from_dict(json.loads(path.read_text()))
    if seed_override is not None:
        cfg = replace(cfg, master_seed=seed_override)
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.seed_override)
        root = args.out or Path(cfg.out_dir) / f"run-{metrics.config_hash(cfg.hashable())[:12]}"
        COMMANDS[args.command][0](Run(cfg, root), args)
    except StageDependencyError as exc:
        log.error("%s", exc)
        return 3
    except SynthesisFailure as exc:
        log.error("%s", exc)
        return 1
    except (ValueError, jsonschema.ValidationError) as exc:  # invalid arguments, malformed files, schema violations
        log.error("%s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
