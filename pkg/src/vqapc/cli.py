"""Pipeline CLI: featurize, synth, train, sweep, extract, probe, analyze.

Stages communicate only through files (FMAT features, JSONL manifests,
text alignments/codes, checkpoints), so any stage can be rerun from the
previous stage's outputs. Every output directory receives the effective
config used, and report paths render matplotlib figures next to the CSVs.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numerics.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from pathlib import Path

import numpy as np

from . import analysis, features, probing, synthetic, training
from .errors import ConfigError, DataError, VqApcError
from .model import ModelConfig, extract_features, load_checkpoint
from .plots import save_loss_curve, save_sweep_curves


def _load_config(path):
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def _echo_config(out_dir, config):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.json", "w") as fh:
        json.dump(config, fh, sort_keys=True, indent=2)


def _model_config(section, input_dim, overrides):
    section = dict(section or {})
    for key, value in overrides.items():
        if value is not None:
            section[key] = value
    declared = section.get("input_dim")
    if declared is not None and declared != input_dim:
        raise ConfigError(
            f"config input_dim {declared} does not match corpus dimension {input_dim}"
        )
    section["input_dim"] = input_dim
    return ModelConfig.from_dict(section)


# -- subcommands ---------------------------------------------------------------


def cmd_synth(args):
    config = _load_config(args.config)
    synth_cfg = synthetic.SynthConfig.from_dict(config.get("synth"))
    if args.seed is not None:
        synth_cfg.seed = args.seed
    seqs, alignments, _ = synthetic.generate_corpus(synth_cfg)
    synthetic.write_corpus(args.out_dir, seqs, alignments)
    _echo_config(args.out_dir, {"synth": synth_cfg.to_dict()})
    print(f"wrote {len(seqs)} utterances to {args.out_dir}")
    return 0


def cmd_featurize(args):
    config = _load_config(args.config)
    mel_cfg = features.mel_config_from_dict(config.get("mel"))
    records = features.read_manifest(args.manifest)
    manifest_dir = Path(args.manifest).parent
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seqs, out_records = [], []
    for rec in records:
        if "wav_path" not in rec:
            raise DataError(f"utterance {rec['id']}: manifest record lacks wav_path")
        wav_path = Path(rec["wav_path"])
        if not wav_path.is_absolute():
            wav_path = manifest_dir / wav_path
        if not wav_path.exists():
            raise DataError(f"utterance {rec['id']}: missing WAV {wav_path}")
        utt = features.read_wav(wav_path, rec["id"], rec["speaker_id"])
        seqs.append(features.log_mel(utt, mel_cfg))
        out_rec = {
            "id": rec["id"],
            "speaker_id": rec["speaker_id"],
            "feature_path": f"{rec['id']}.fmat",
        }
        if rec.get("phone_alignment_path"):
            src = Path(rec["phone_alignment_path"])
            if not src.is_absolute():
                src = manifest_dir / src
            dst = f"{rec['id']}.phn"
            shutil.copyfile(src, out_dir / dst)
            out_rec["phone_alignment_path"] = dst
        out_records.append(out_rec)
    seqs = features.normalize_per_speaker(seqs)
    for seq in seqs:
        features.save_feature_sequence(out_dir, seq, mel_cfg.frame_shift_ms)
    features.write_manifest(out_dir / "manifest.jsonl", out_records)
    _echo_config(out_dir, {"mel": features.mel_config_to_dict(mel_cfg)})
    print(f"featurized {len(seqs)} utterances into {out_dir}")
    return 0


def _train_once(corpus, config, args, out_dir):
    overrides = {
        "vq_layers": [int(v) for v in args.vq_layers.split(",") if v]
        if getattr(args, "vq_layers", None) is not None
        else None,
        "codebook_size": getattr(args, "codebook_size", None),
    }
    model_cfg = _model_config(config.get("model"), corpus[0].dim, overrides)
    train_section = dict(config.get("train") or {})
    if getattr(args, "seed", None) is not None:
        train_section["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        train_section["epochs"] = args.epochs
    train_cfg = training.TrainConfig.from_dict(train_section)
    _echo_config(out_dir, {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()})
    model, state = training.train(corpus, model_cfg, train_cfg, out_dir=out_dir)
    save_loss_curve(state.loss_history, Path(out_dir) / "loss.png")
    return model, state, model_cfg, train_cfg


def cmd_train(args):
    config = _load_config(args.config)
    corpus, _ = features.load_corpus(args.data_dir)
    _, state, _, _ = _train_once(corpus, config, args, args.out_dir)
    print(f"trained {state.epoch} epochs; final loss {state.loss_history[-1]:.6f}")
    return 0


def _extract_corpus(model, corpus, layer, quantized):
    reprs, codes = [], {}
    for seq in corpus:
        rep, k = extract_features(seq.frames, model, layer, quantized)
        reprs.append(rep)
        if k is not None:
            codes[seq.utterance_id] = k
    return reprs, codes


def cmd_sweep(args):
    sizes = [int(s) for s in args.sizes.split(",") if s]
    if not sizes:
        raise ConfigError("empty codebook size list")
    config = _load_config(args.config)
    corpus, alignments = features.load_corpus(args.data_dir)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    for size in sizes:
        run_dir = out_dir / f"run_V{size}"
        args.codebook_size = size
        model, state, model_cfg, _ = _train_once(corpus, config, args, run_dir)
        layer = max(model_cfg.vq_layers) if model_cfg.vq_layers else model_cfg.num_layers
        reprs, _ = _extract_corpus(model, corpus, layer, quantized=False)
        phone_err = _probe_mean(reprs, corpus, alignments, "phone", args.probe_seeds)
        speaker_err = _probe_mean(reprs, corpus, alignments, "speaker", args.probe_seeds)
        rows.append((size, state.loss_history[-1], phone_err, speaker_err))

    with open(out_dir / "summary.csv", "w", newline="") as fh:
        fh.write("codebook_size,final_loss,phone_err,speaker_err\n")
        for size, loss, p_err, s_err in rows:
            fh.write(f"{size},{loss:.6f},{p_err:.6f},{s_err:.6f}\n")
    save_sweep_curves(
        [r[0] for r in rows], [r[1] for r in rows],
        [r[2] for r in rows], [r[3] for r in rows],
        out_dir / "sweep.png",
    )
    print(f"sweep complete: {out_dir / 'summary.csv'}")
    return 0


def cmd_extract(args):
    model, header = load_checkpoint(args.checkpoint)
    corpus, _ = features.load_corpus(args.data_dir)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data_dir = Path(args.data_dir)
    records = []
    for seq in corpus:
        rep, k = extract_features(seq.frames, model, args.layer, args.quantized)
        rep_seq = features.FeatureSequence(seq.utterance_id, seq.speaker_id, rep)
        features.save_feature_sequence(out_dir, rep_seq)
        rec = {
            "id": seq.utterance_id,
            "speaker_id": seq.speaker_id,
            "feature_path": f"{seq.utterance_id}.fmat",
        }
        ali_src = data_dir / f"{seq.utterance_id}.phn"
        if ali_src.exists():
            shutil.copyfile(ali_src, out_dir / ali_src.name)
            rec["phone_alignment_path"] = ali_src.name
        if k is not None:
            analysis.write_code_file(out_dir / f"{seq.utterance_id}.codes", k)
        records.append(rec)
    features.write_manifest(out_dir / "manifest.jsonl", records)
    meta = {
        "model_tag": Path(args.checkpoint).stem,
        "layer": args.layer,
        "quantized": bool(args.quantized),
        "codebook_size": header["config"]["codebook_size"],
        "vq_layers": header["config"]["vq_layers"],
    }
    with open(out_dir / "meta.json", "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
    print(f"extracted layer-{args.layer} representations for {len(corpus)} utterances")
    return 0


def _build_task_dataset(reprs, corpus, alignments, task):
    if task == "phone":
        ali_list = []
        for seq in corpus:
            if seq.utterance_id not in alignments:
                raise DataError(f"utterance {seq.utterance_id}: missing phone alignment")
            ali_list.append(alignments[seq.utterance_id])
        num_phones = int(max(a.max() for a in ali_list)) + 1
        return probing.build_phone_dataset(
            reprs, ali_list, num_classes=num_phones,
            utterance_ids=[s.utterance_id for s in corpus],
        )
    return probing.build_speaker_dataset(reprs, [s.speaker_id for s in corpus])


def _probe_mean(reprs, corpus, alignments, task, seeds):
    dataset = _build_task_dataset(reprs, corpus, alignments, task)
    train, dev, test = probing.split_dataset(dataset, seed=0)
    results = probing.run_probe_task(train, dev, test, seeds=range(seeds))
    return float(np.mean([err for _, err in results]))


def cmd_probe(args):
    corpus, alignments = features.load_corpus(args.repr_dir)
    meta_path = Path(args.repr_dir) / "meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    reprs = [seq.frames for seq in corpus]
    dataset = _build_task_dataset(reprs, corpus, alignments, args.task)
    train, dev, test = probing.split_dataset(dataset, seed=args.split_seed)
    results = probing.run_probe_task(train, dev, test, seeds=range(args.seeds))
    mean = probing.write_probe_report(
        args.out,
        meta.get("model_tag", "unknown"),
        meta.get("layer", -1),
        meta.get("quantized", False),
        args.task,
        results,
    )
    print(f"{args.task} probe mean error over {args.seeds} seeds: {mean:.4f}")
    return 0


def cmd_analyze(args):
    corpus, alignments = features.load_corpus(args.code_dir)
    meta_path = Path(args.code_dir) / "meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    code_dir = Path(args.code_dir)
    code_seqs, phone_seqs, ids = [], [], []
    for seq in corpus:
        code_path = code_dir / f"{seq.utterance_id}.codes"
        if not code_path.exists():
            raise DataError(f"utterance {seq.utterance_id}: missing code file")
        if seq.utterance_id not in alignments:
            raise DataError(f"utterance {seq.utterance_id}: missing phone alignment")
        code_seqs.append(analysis.read_code_file(code_path))
        phone_seqs.append(alignments[seq.utterance_id])
        ids.append(seq.utterance_id)
    num_phones = args.num_phones or int(max(p.max() for p in phone_seqs)) + 1
    num_codes = meta.get("codebook_size") or int(max(c.max() for c in code_seqs)) + 1
    cont = analysis.accumulate_cooccurrence(code_seqs, phone_seqs, num_phones, num_codes, ids)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stats = analysis.analysis_stats(cont)
    analysis.write_stats_json(out_dir / "stats.json", stats)
    cond = analysis.conditional_prob(cont)
    nonzero_rows = cont.counts.sum(axis=1) > 0
    usable = min(int(nonzero_rows.sum()), stats["num_used_codes"])
    k = min(args.k, usable) if usable >= 2 else None
    if k is not None and k >= 2:
        ordering = analysis.spectral_cocluster(cont.counts, k, seed=args.seed)
        analysis.emit_heatmap(cond, ordering, args.saturation,
                              out_dir / "heatmap.csv", out_dir / "heatmap.png")
    _echo_config(out_dir, {"analysis": {"k": args.k, "saturation": args.saturation,
                                        "num_phones": num_phones, "num_codes": num_codes}})
    print(f"NMI = {stats['nmi']:.4f} over {stats['num_used_codes']} used codes")
    return 0


# -- entry point ----------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="vqapc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic feature corpus")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("featurize", help="WAV manifest -> log-Mel features")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="train a VQ-APC model")
    p.add_argument("--config")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--vq-layers", help="comma-separated layer indices, e.g. 3")
    p.add_argument("--codebook-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="train at several codebook sizes")
    p.add_argument("--config")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--sizes", required=True, help="comma-separated codebook sizes")
    p.add_argument("--vq-layers")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--probe-seeds", type=int, default=5)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("extract", help="dump layer representations / codes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--quantized", action="store_true")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("probe", help="linear probe over extracted representations")
    p.add_argument("--repr-dir", required=True)
    p.add_argument("--task", choices=("phone", "speaker"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--split-seed", type=int, default=0)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("analyze", help="code/phone co-occurrence analysis")
    p.add_argument("--code-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--k", type=int, default=15)
    p.add_argument("--saturation", type=float, default=0.5)
    p.add_argument("--num-phones", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_analyze)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except VqApcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
