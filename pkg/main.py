# main.py
"""Línea de comandos: refine, refine-batch, eval, bench y synth gen.

Los errores se imprimen en una sola línea `error code=<CODE> message="..."` con estado de salida 1.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from pydantic import ValidationError

from config.refine_config import NoiseSpec, RefineConfig, load_config_file
from config.settings import LOG_FILE, LOG_FORMAT, LOG_LEVEL, POSE_REFINE_SEED, POSE_REFINE_DEPTH_SCALE
from core.errors import ConfigError, MalformedJson, MissingFile, PoseRefineError

logger = logging.getLogger(__name__)


# ============================
# CONFIGURAR LOGGING
# ============================
def configure_logging():
    handlers = [logging.StreamHandler(sys.stderr)]
    if LOG_FILE:
        handlers.append(logging.FileHandler(LOG_FILE))
    logging.basicConfig(level=LOG_LEVEL, format=LOG_FORMAT, handlers=handlers, force=True)


# ============================
# Utilidades
# ============================
def _load_configs(args):
    if args.config:
        cfg, noise = load_config_file(args.config)
    else:
        cfg, noise = RefineConfig(), NoiseSpec()
    seed = args.seed if args.seed is not None else POSE_REFINE_SEED
    # la semilla de la línea de comandos pasa por los validadores del modelo
    cfg = _validated(RefineConfig, {**cfg.model_dump(), "seed": seed})
    noise = _validated(NoiseSpec, {**noise.model_dump(), "seed": seed})
    return cfg, noise, seed


def _validated(model, data: dict):
    try:
        return model.model_validate(data)
    except ValidationError as e:
        detail = "; ".join(f"{'.'.join(map(str, err['loc']))}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"{model.__name__} inválido: {detail}")


def _read_json_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingFile(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise MalformedJson(path, f"línea {e.lineno}: {e.msg}")


def _pose_from_json(path):
    from core.geometry import Pose

    data = _read_json_file(path)
    try:
        R = data.get("R", data.get("cam_R_m2c"))
        t = data.get("t_mm", data.get("t", data.get("cam_t_m2c")))
        return Pose(np.asarray(R, dtype=np.float64).reshape(3, 3), np.asarray(t, dtype=np.float64).reshape(3))
    except (TypeError, ValueError) as e:
        raise MalformedJson(path, f"pose inválida: {e}")


def _intrinsics_from_json(path, shape):
    from core.geometry import Intrinsics

    data = _read_json_file(path)
    try:
        K = np.asarray(data.get("cam_K", data.get("K")), dtype=np.float64).reshape(3, 3)
    except (TypeError, ValueError) as e:
        raise MalformedJson(path, f"cam_K inválido: {e}")
    width = int(data.get("width", shape[1]))
    height = int(data.get("height", shape[0]))
    return Intrinsics.from_matrix(K, width, height)


def _pose_json(pose, **extra) -> dict:
    out = {"R": pose.R.reshape(-1).tolist(), "t_mm": pose.t.tolist()}
    out.update(extra)
    return out


def _emit(text: str, out: Optional[str]):
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


# ============================
# Subcomandos
# ============================
def cmd_refine(args) -> int:
    from core.flowfield import save_flow
    from core.mesh_render import load_mesh, read_depth_png, read_intensity_png
    from core.refiner import refine
    from harness.bop_io import load_bop_scene, load_object_model
    from harness.synthetic import level_spec, perturb_pose

    cfg, _, seed = _load_configs(args)
    if args.dataset:
        if args.obj_id is None:
            raise ConfigError("--obj-id es obligatorio con --dataset")
        frame = load_bop_scene(args.dataset, args.scene_id, args.im_id, args.split)
        mesh = load_object_model(args.dataset, args.obj_id)
        rgb, depth, k = frame.rgb, frame.depth, frame.k
        if args.init_pose:
            p_init = _pose_from_json(args.init_pose)
        elif args.init_level:
            p_init = perturb_pose(frame.gt_for(args.obj_id), level_spec(args.init_level, seed),
                                  args.scene_id, args.im_id, args.obj_id)
        else:
            p_init = frame.gt_for(args.obj_id)
    else:
        missing = [name for name in ("mesh", "rgb", "depth", "intrinsics", "init_pose") if not getattr(args, name)]
        if missing:
            raise ConfigError(f"faltan argumentos: {', '.join('--' + m.replace('_', '-') for m in missing)}")
        mesh = load_mesh(args.mesh)
        depth = read_depth_png(args.depth, args.depth_scale)
        rgb = read_intensity_png(args.rgb)
        k = _intrinsics_from_json(args.intrinsics, depth.shape)
        p_init = _pose_from_json(args.init_pose)

    trace = refine(rgb, depth, mesh, k, p_init, cfg)
    if args.dump_flow:
        for record in trace.records:
            save_flow(Path(args.dump_flow) / f"flow_{record.k:02d}.scf", record.flow)
        logger.info(f"Flujos de {len(trace.records)} iteraciones volcados en {args.dump_flow}")
    skipped = sum(r.diagnostics.skipped for r in trace.records)
    result = _pose_json(trace.final_pose, seed=seed, iterations=cfg.iterations, skipped_iterations=skipped,
                        init=_pose_json(p_init))
    _emit(json.dumps(result, indent=2), args.out)
    return 0


def cmd_refine_batch(args) -> int:
    from harness.bop_io import read_bop_results, refine_bop_results, write_bop_results

    cfg, _, _ = _load_configs(args)
    rows = read_bop_results(args.results)
    write_bop_results(refine_bop_results(args.dataset, rows, cfg, args.split), args.out)
    return 0


def cmd_eval(args) -> int:
    from harness.bop_io import evaluate_results, read_bop_results

    report = evaluate_results(args.dataset, read_bop_results(args.results), args.split)
    if args.out_csv:
        report.write_csv(args.out_csv)
    if args.out_json:
        report.write_json(args.out_json)
    else:
        print(json.dumps(report.summary(), indent=2))
    return 0


def cmd_bench(args) -> int:
    from harness.bench import run_suite, write_table

    cfg, _, seed = _load_configs(args)
    rows = run_suite(args.suite, args.seeds, seed, cfg)
    out = args.out or f"bench_{args.suite}_seed{seed}.csv"
    write_table(rows, out)
    return 0


def cmd_synth_gen(args) -> int:
    from harness.bop_io import BopResultRow, write_bop_frame, write_bop_results, write_object_model
    from harness.synthetic import SHAPES, SensorNoise, gen_scene, level_spec, perturb_pose

    _, noise, seed = _load_configs(args)
    shapes = [s.strip() for s in args.shapes.split(",") if s.strip()]
    unknown = [s for s in shapes if s not in SHAPES]
    if unknown:
        raise ConfigError(f"formas desconocidas: {', '.join(unknown)}")
    sensor = SensorNoise.clean() if args.no_noise else SensorNoise()
    sensor = _validated(SensorNoise, {**sensor.model_dump(), "occluder_fraction": args.occlusion})
    spec = level_spec(args.init_level, seed) if args.init_level else noise
    gt_rows, init_rows = [], []
    for i in range(args.count):
        shape = shapes[i % len(shapes)]
        scene = gen_scene(shape, seed * 100003 + i, sensor)
        obj_id = i + 1
        write_object_model(args.out, obj_id, scene.mesh)
        write_bop_frame(args.out, 0, i, scene.rgb, scene.depth, scene.k, [(obj_id, scene.pose_gt)], args.split)
        gt_rows.append(BopResultRow(0, i, obj_id, 1.0, scene.pose_gt, 0.0))
        init_rows.append(BopResultRow(0, i, obj_id, 1.0, perturb_pose(scene.pose_gt, spec, 0, i, obj_id), 0.0))
    write_bop_results(gt_rows, Path(args.out) / "results_gt.csv")
    write_bop_results(init_rows, Path(args.out) / "results_init.csv")
    logger.info(f"✅ {args.count} escenas sintéticas exportadas en formato BOP en {args.out}")
    return 0


# ============================
# Parser
# ============================
class _Parser(argparse.ArgumentParser):
    """Los errores de argumentos salen por el mismo canal que el resto: ConfigError y estado 1"""

    def error(self, message: str):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pose-refine", description="Refinamiento de pose 6D por render-and-compare")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="archivo KEY=VALUE con RefineConfig y NoiseSpec")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("refine", help="refina una pose")
    common(p)
    p.add_argument("--mesh")
    p.add_argument("--rgb")
    p.add_argument("--depth")
    p.add_argument("--depth-scale", type=float, default=POSE_REFINE_DEPTH_SCALE)
    p.add_argument("--intrinsics", help="JSON con cam_K (9 valores) y opcionalmente width/height")
    p.add_argument("--init-pose", help="JSON con R (9 valores) y t_mm (3 valores)")
    p.add_argument("--dataset", help="raíz BOP; sustituye a --mesh/--rgb/--depth/--intrinsics")
    p.add_argument("--split", default="test")
    p.add_argument("--scene-id", type=int, default=0)
    p.add_argument("--im-id", type=int, default=0)
    p.add_argument("--obj-id", type=int)
    p.add_argument("--init-level", type=float, help="inicializa con la GT perturbada al nivel L")
    p.add_argument("--dump-flow", help="directorio para los flujos SCF2 de cada iteración")
    p.add_argument("--out", help="archivo JSON de salida (por defecto stdout)")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("refine-batch", help="refina todas las filas de un CSV de resultados BOP")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--results", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_refine_batch)

    p = sub.add_parser("eval", help="AR de VSD/MSSD/MSPD de un CSV de resultados")
    p.add_argument("--dataset", required=True)
    p.add_argument("--results", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out-json")
    p.add_argument("--out-csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="suites sintéticas")
    common(p)
    p.add_argument("--suite", required=True, choices=["noise-sweep", "iteration-sweep", "baseline-compare"])
    p.add_argument("--seeds", type=int, default=20, help="número de escenas por configuración")
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="datos sintéticos")
    synth = p.add_subparsers(dest="synth_command", required=True)
    g = synth.add_parser("gen", help="genera escenas en formato BOP")
    common(g)
    g.add_argument("--shapes", default="cube,icosphere,cylinder")
    g.add_argument("--count", type=int, default=10)
    g.add_argument("--out", required=True)
    g.add_argument("--split", default="test")
    g.add_argument("--occlusion", type=float, default=0.0)
    g.add_argument("--no-noise", action="store_true")
    g.add_argument("--init-level", type=float)
    g.set_defaults(func=cmd_synth_gen)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    configure_logging()
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except PoseRefineError as e:
        logger.error(f"❌ {e.code}: {e.message}")
        print(f'error code={e.code} message="{e.message}"', file=sys.stderr)
        return 1
    except OSError as e:
        logger.error(f"❌ Error de E/S: {e}")
        print(f'error code=IOError message="{e}"', file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
