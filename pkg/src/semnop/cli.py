"""Command-line entry point wiring all modules into reproducible workflows.

Defaults follow the evaluated setting: 64-column images, 8-byte blocks
after every instruction, 10 attack iterations. A flat key=value config
file can supply any long-option default; explicit flags win.

Exit codes: 0 success, 2 bad argument/config, 3 malformed or unsupported
file, 4 decode error, 5 unfillable block, 6 numerical failure,
7 verification failure, 1 anything else.
"""

from __future__ import annotations

import concurrent.futures
import functools
import sys
from pathlib import Path

import click

from . import attack, corpus, detector, emu, images, isa, maskgen
from . import errors as err

_EXIT_CODES = (
    ((err.InvalidArgumentError, err.ConfigError), 2),
    ((err.FormatError, err.UnsupportedFormatError, err.UnsupportedShapeError), 3),
    ((err.DecodeError,), 4),
    ((err.UnfillableBlockError,), 5),
    ((err.NumericalFailureError,), 6),
    ((err.VerificationFailureError,), 7),
)


def _run(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except err.SemnopError as exc:
            for classes, code in _EXIT_CODES:
                if isinstance(exc, classes):
                    click.echo(f"error: {exc}", err=True)
                    sys.exit(code)
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)
    return wrapper


def _load_config(path):
    cfg = {}
    if path:
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise err.ConfigError(f"{path} line {lineno}: expected key=value")
            key, value = line.split("=", 1)
            cfg[key.strip().replace("-", "_")] = value.strip()
    return cfg


def _get(ctx, key, flag_value, default, cast=str):
    """Flag > config file > built-in default."""
    if flag_value is not None:
        return flag_value
    cfg = ctx.obj or {}
    if key in cfg:
        try:
            return cast(cfg[key])
        except ValueError as exc:
            raise err.ConfigError(f"config key {key}: {exc}") from exc
    return default


@click.group()
@click.option("--config", type=click.Path(exists=True), default=None,
              help="Flat key=value config file supplying option defaults.")
@click.pass_context
def main(ctx, config):
    ctx.obj = _load_config(config)


def _read_input_image(path, width):
    path = str(path)
    if path.endswith(".png"):
        return images.read_png(path)
    return images.bytes_to_image(Path(path).read_bytes(), width)


@main.command("convert")
@click.argument("src", type=click.Path(exists=True))
@click.argument("dst", type=click.Path())
@click.option("--width", type=int, default=None)
@click.pass_context
@_run
def cmd_convert(ctx, src, dst, width):
    """Binary <-> PNG conversion; direction follows DST's extension."""
    width = _get(ctx, "width", width, images.DEFAULT_WIDTH, int)
    if str(dst).endswith(".png"):
        images.write_png(images.bytes_to_image(Path(src).read_bytes(), width), dst)
    else:
        Path(dst).write_bytes(images.image_to_bytes(images.read_png(src)))


@main.command("train")
@click.argument("manifest", type=click.Path(exists=True))
@click.argument("out_model", type=click.Path())
@click.option("--epochs", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--momentum", type=float, default=None)
@click.option("--ratio", type=float, default=None, help="Train split fraction.")
@click.option("--seed", type=int, default=None)
@click.option("--width", type=int, default=None)
@click.pass_context
@_run
def cmd_train(ctx, manifest, out_model, epochs, batch_size, lr, momentum,
              ratio, seed, width):
    """Train the detector on a manifest; writes model + metrics report."""
    seed = _get(ctx, "seed", seed, 0, int)
    width = _get(ctx, "width", width, images.DEFAULT_WIDTH, int)
    cfg = detector.TrainConfig(
        epochs=_get(ctx, "epochs", epochs, 20, int),
        batch_size=_get(ctx, "batch_size", batch_size, 16, int),
        learning_rate=_get(ctx, "lr", lr, 1e-3, float),
        momentum=_get(ctx, "momentum", momentum, 0.9, float),
        seed=seed,
    )
    records = corpus.load_manifest(manifest)
    train_recs, val_recs = corpus.split(records, _get(ctx, "ratio", ratio, 0.5, float),
                                        seed=seed)
    train_data = corpus.load_labeled(train_recs, width)
    val_data = corpus.load_labeled(val_recs, width)
    model = detector.init_model(seed=seed)
    metrics = detector.train(model, train_data, cfg, val_data=val_data)
    detector.save_model(model, out_model)
    report = Path(f"{out_model}.metrics.tsv")
    with report.open("w") as fh:
        keys = list(metrics[-1])
        fh.write("\t".join(keys) + "\n")
        for entry in metrics:
            fh.write("\t".join(str(entry.get(k, "")) for k in keys) + "\n")
    final = metrics[-1]
    click.echo(f"model: {out_model}")
    click.echo(f"val_acc: {final['val_acc']:.4f} "
               f"(benign recall {final['recall_benign']:.4f}, "
               f"malware recall {final['recall_malware']:.4f})")


@main.command("classify")
@click.argument("model_path", type=click.Path(exists=True))
@click.argument("inputs", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("--width", type=int, default=None)
@click.pass_context
@_run
def cmd_classify(ctx, model_path, inputs, width):
    """Print a benign/malware label per input (PNG or raw binary)."""
    width = _get(ctx, "width", width, images.DEFAULT_WIDTH, int)
    model = detector.load_model(model_path)
    for path in inputs:
        img = _read_input_image(path, width)
        label = detector.predict(model, images.normalize(img))
        click.echo(f"{path}\t{detector.LABEL_NAMES[label]}")


def _attack_one(record, model, mask_cfg, attack_cfg, out_dir):
    code = Path(record.path).read_bytes()
    if record.sidecar:
        stream = isa.load_boundaries(record.sidecar)
    else:
        stream = isa.decode(code)
    result = attack.run_attack(model, code, stream, mask_cfg, attack_cfg)
    stem = Path(record.path).stem
    adv_path = Path(out_dir) / f"{stem}.adv.bin"
    adv_path.write_bytes(result.viable_binary)
    spans = maskgen.AugmentedBinary(result.viable_binary,
                                    _spans_of(result, code, mask_cfg, stream), {})
    maskgen.save_spans(spans, f"{adv_path}.spans")
    line = (f"{stem}\t{int(result.success)}\t{result.outer_iters_used}"
            f"\t{result.wall_time * 1000:.1f}\t{result.expansion_rate:.4f}"
            f"\t{result.final_cw_loss:.6g}")
    return line, result.success


def _spans_of(result, code, mask_cfg, stream):
    if result.outer_iters_used == 0:
        return ()
    aug, _, _ = maskgen.augment(code, stream, mask_cfg)
    return aug.block_spans


_WORKER_STATE = {}


def _worker_init(model_path, mask_cfg, attack_cfg, out_dir):
    _WORKER_STATE["model"] = detector.load_model(model_path)
    _WORKER_STATE["args"] = (mask_cfg, attack_cfg, out_dir)


def _worker_run(record):
    mask_cfg, attack_cfg, out_dir = _WORKER_STATE["args"]
    return _attack_one(record, _WORKER_STATE["model"], mask_cfg, attack_cfg, out_dir)


@main.command("attack")
@click.argument("model_path", type=click.Path(exists=True))
@click.argument("manifest", type=click.Path(exists=True))
@click.option("--out", type=click.Path(), default=None)
@click.option("--width", type=int, default=None)
@click.option("--block-size", type=int, default=None)
@click.option("--frequency", type=int, default=None)
@click.option("--threshold", type=int, default=None, help="Max outer iterations.")
@click.option("--c", "--C", "c_const", type=float, default=None)
@click.option("--step-size", type=float, default=None)
@click.option("--inner-steps", type=int, default=None)
@click.option("--kappa", type=float, default=None)
@click.option("--init-mode", type=click.Choice(["naive_nops", "random_nops"]),
              default=None)
@click.option("--restart-mode", type=click.Choice(["from_failed_ae", "random_reinit"]),
              default=None)
@click.option("--seed", type=int, default=None)
@click.option("--jobs", type=int, default=None)
@click.pass_context
@_run
def cmd_attack(ctx, model_path, manifest, out, width, block_size, frequency,
               threshold, c_const, step_size, inner_steps, kappa, init_mode,
               restart_mode, seed, jobs):
    """Attack every malware binary in the manifest; emit report + binaries."""
    out = Path(_get(ctx, "out", out, "attack_out"))
    out.mkdir(parents=True, exist_ok=True)
    seed = _get(ctx, "seed", seed, 0, int)
    mask_cfg = maskgen.MaskConfig(
        block_size=_get(ctx, "block_size", block_size, 8, int),
        frequency=_get(ctx, "frequency", frequency, 1, int),
        init_mode=_get(ctx, "init_mode", init_mode, "naive_nops"),
        width=_get(ctx, "width", width, images.DEFAULT_WIDTH, int),
        seed=seed,
    )
    attack_cfg = attack.AttackConfig(
        C=_get(ctx, "C", c_const, 1.0, float),
        step_size=_get(ctx, "step_size", step_size, 0.01, float),
        inner_steps=_get(ctx, "inner_steps", inner_steps, 200, int),
        max_outer_iters=_get(ctx, "threshold", threshold, 10, int),
        kappa=_get(ctx, "kappa", kappa, 0.0, float),
        restart_mode=_get(ctx, "restart_mode", restart_mode, "from_failed_ae"),
        seed=seed,
    )
    jobs = _get(ctx, "jobs", jobs, 1, int)
    targets = [r for r in corpus.load_manifest(manifest)
               if r.label == "malware" and r.kind == "binary"]
    if not targets:
        raise err.ConfigError("manifest has no malware binaries to attack")
    isa.generate_nops(mask_cfg.block_size)  # warm + validate the catalog early

    lines = []
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(
            max_workers=jobs, initializer=_worker_init,
            initargs=(model_path, mask_cfg, attack_cfg, str(out)),
        ) as pool:
            lines = list(pool.map(_worker_run, targets))
    else:
        model = detector.load_model(model_path)
        for record in targets:
            lines.append(_attack_one(record, model, mask_cfg, attack_cfg, str(out)))

    report = out / "report.tsv"
    with report.open("w") as fh:
        for line, _ in lines:
            fh.write(line + "\n")
            click.echo(line)
    n_ok = sum(ok for _, ok in lines)
    click.echo(f"success: {n_ok}/{len(lines)}")


@main.command("nopgen")
@click.argument("length", type=int)
@click.option("--limit", type=int, default=None)
@click.pass_context
@_run
def cmd_nopgen(ctx, length, limit):
    """Print semantic NOP sequences of exactly LENGTH bytes, one per line."""
    limit = _get(ctx, "limit", limit, isa.DEFAULT_NOP_LIMIT, int)
    for seq in isa.generate_nops(length, limit):
        click.echo(seq.bytes.hex())


@main.command("verify")
@click.argument("binary", type=click.Path(exists=True))
@click.argument("original", type=click.Path(exists=True))
@click.argument("spans", type=click.Path(exists=True))
@click.option("--model", "model_path", type=click.Path(exists=True), default=None)
@click.option("--width", type=int, default=None)
@click.option("--trials", type=int, default=1000)
@click.pass_context
@_run
def cmd_verify(ctx, binary, original, spans, model_path, width, trials):
    """Assert viability: strip equality, catalog membership, neutrality."""
    width = _get(ctx, "width", width, images.DEFAULT_WIDTH, int)
    adv = Path(binary).read_bytes()
    orig = Path(original).read_bytes()
    span_list = maskgen.load_spans(spans)
    aug = maskgen.AugmentedBinary(adv, span_list, {})

    stripped = maskgen.strip(aug)
    if stripped != orig:
        offset = next(
            (i for i, (a, b) in enumerate(zip(stripped, orig)) if a != b),
            min(len(stripped), len(orig)),
        )
        raise err.VerificationFailureError(
            f"stripped binary differs from original at offset {offset}"
        )
    click.echo("strip equality: ok")

    nop_cache = {}
    for offset, length in span_list:
        block = adv[offset:offset + length]
        if length not in nop_cache:
            nop_cache[length] = {s.bytes for s in isa.generate_nops(length, None)}
        if block not in nop_cache[length]:
            raise err.VerificationFailureError(
                f"block at offset {offset} is not a cataloged NOP sequence"
            )
    click.echo(f"catalog membership: ok ({len(span_list)} blocks)")

    checked = {}
    for offset, length in span_list:
        block = adv[offset:offset + length]
        if block not in checked:
            ok, counterexample = emu.check_neutral(block, trials=trials)
            checked[block] = ok
            if not ok:
                raise err.VerificationFailureError(
                    f"block at offset {offset} is not neutral: {counterexample}"
                )
    click.echo(f"emulator neutrality: ok ({len(checked)} distinct blocks, "
               f"{trials} trials each)")

    if model_path:
        model = detector.load_model(model_path)
        img = images.bytes_to_image(adv, width)
        label = detector.predict(model, images.normalize(img))
        click.echo(f"detector label: {detector.LABEL_NAMES[label]}")


if __name__ == "__main__":
    main()
