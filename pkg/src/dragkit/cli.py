"""Command-line interface: batch edits and the local HTTP service."""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click
import numpy as np
from PIL import Image

from .config import ENV_CONFIG_VAR, EngineConfig, build_engine, drag_config_from_settings, load_config
from .errors import DragkitError, InvalidInputError
from .softmask import PointPair, save_mask_png

EXIT_BAD_IMAGE = 2
EXIT_BAD_POINTS = 3
EXIT_ENGINE_FAILURE = 4


def read_image(path) -> np.ndarray:
    """Load an 8-bit RGB PNG as floats in [0, 1]."""
    with Image.open(path) as img:
        rgb = img.convert("RGB")
        return np.asarray(rgb, dtype=np.float64) / 255.0


def write_image(image: np.ndarray, path) -> None:
    data = np.round(255.0 * np.clip(image, 0.0, 1.0)).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def parse_points(raw) -> list:
    """Points files hold a JSON list of {handle: [x, y], target: [x, y]}."""
    if not isinstance(raw, list) or not raw:
        raise InvalidInputError("points file must hold a non-empty list")
    pairs = []
    for i, entry in enumerate(raw):
        if not isinstance(entry, dict) or set(entry) != {"handle", "target"}:
            raise InvalidInputError(f"entry {i} must have exactly handle and target")
        handle, target = entry["handle"], entry["target"]
        for name, pt in (("handle", handle), ("target", target)):
            if (
                not isinstance(pt, list)
                or len(pt) != 2
                or not all(isinstance(v, int) for v in pt)
            ):
                raise InvalidInputError(f"entry {i} {name} must be two integers")
        pairs.append(PointPair(handle=tuple(handle), target=tuple(target)))
    return pairs


def _resolve_config(config_path) -> EngineConfig:
    if config_path is None:
        config_path = os.environ.get(ENV_CONFIG_VAR)
    if config_path is None:
        return EngineConfig()
    return load_config(config_path)


@click.group()
def main() -> None:
    """Point-drag image editing over a toy diffusion backend."""


@main.command()
@click.option("--image", "image_path", required=True, type=click.Path(), help="Input PNG.")
@click.option("--points", "points_path", required=True, type=click.Path(), help="JSON pair list.")
@click.option("--config", "config_path", type=click.Path(), default=None, help="Engine config JSON.")
@click.option("--out", "out_dir", type=click.Path(), default=None, help="Output directory.")
@click.option("--seed", type=int, default=0, show_default=True, help="Seed for head training.")
@click.option("--debug", is_flag=True, help="Write intermediate artifacts.")
def edit(image_path, points_path, config_path, out_dir, seed, debug) -> None:
    """Run one drag edit and write the edited image, mask, and report."""
    try:
        config = _resolve_config(config_path)
    except DragkitError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_ENGINE_FAILURE)

    try:
        image = read_image(image_path)
    except (OSError, ValueError) as exc:
        click.echo(f"error: cannot read image {image_path}: {exc}", err=True)
        sys.exit(EXIT_BAD_IMAGE)

    try:
        raw = json.loads(Path(points_path).read_text())
        pairs = parse_points(raw)
    except (OSError, json.JSONDecodeError, DragkitError) as exc:
        click.echo(f"error: invalid points {points_path}: {exc}", err=True)
        sys.exit(EXIT_BAD_POINTS)

    out = Path(out_dir or config.output_dir)
    try:
        engine = build_engine(config, seed=seed)
        result = engine.edit(
            image, pairs, drag_config=drag_config_from_settings(config.drag)
        )
        out.mkdir(parents=True, exist_ok=True)
        write_image(result.image, out / "edited.png")
        save_mask_png(result.mask_image, out / "mask.png")
        report = {"seed": seed, **result.report.to_dict()}
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
        if debug or config.debug:
            np.savez(
                out / "displacement.npz",
                vectors=result.displacement.vectors,
                support=result.displacement.support,
            )
            save_mask_png(result.mask_latent, out / "mask_latent.png")
    except DragkitError as exc:
        click.echo(f"error: edit failed: {exc}", err=True)
        sys.exit(EXIT_ENGINE_FAILURE)
    except OSError as exc:
        click.echo(f"error: cannot write outputs to {out}: {exc}", err=True)
        sys.exit(EXIT_ENGINE_FAILURE)
    click.echo(f"edited image written to {out / 'edited.png'} (MD {report['mean_distance']:.3f})")


@main.command()
@click.option("--bind", default="127.0.0.1:8000", show_default=True, help="host:port.")
@click.option("--config", "config_path", type=click.Path(), default=None, help="Engine config JSON.")
@click.option("--seed", type=int, default=0, show_default=True, help="Seed for head training.")
def serve(bind, config_path, seed) -> None:
    """Run the session-oriented HTTP API for the companion UI."""
    import uvicorn

    from .service import create_app

    try:
        config = _resolve_config(config_path)
        app = create_app(config, seed=seed)
    except DragkitError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_ENGINE_FAILURE)
    host, _, port = bind.partition(":")
    uvicorn.run(app, host=host, port=int(port or 8000), log_level="warning")


if __name__ == "__main__":
    main()
