"""命令行入口

每个命令把结果写入输出目录，并写出 manifest.json（命令、解析后的完整配置、
种子、代码版本以及影响数值结果的环境设置）；`rerun` 重放清单即可逐字节复现全部输出。

配置优先级：模型默认值 < 预设 < 配置文件 (--config) < 命令行参数。
退出码：0 成功，1 用法错误，2 数据/模型错误，3 数值失败。
"""

import argparse
import json
import logging
import os
import sys
from contextlib import contextmanager
from typing import Any, Callable, Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ValidationError
from scipy.stats import spearmanr

from app import __version__
from app.core.config import settings
from app.models.config import (
    COMMAND_MODELS,
    PRESETS,
    CommandConfig,
    CondMatrixCommand,
    DiagnoseCommand,
    GenDataCommand,
    InterpCommand,
    MapCommand,
    MapFormat,
    MatrixCommand,
    ResponsibilityCommand,
    ServeCommand,
    SweepCommand,
    TrainCommand,
    TrainConfig,
)
from app.models.report import (
    CdsReport,
    DatasetReport,
    ExpansionReportModel,
    InterpReport,
    Manifest,
    MapReport,
    MapStats,
    MatrixReport,
    PathReport,
    ResponsibilityReport,
    SweepReport,
    SweepRow,
    TrainReport,
)
from app.utils.logging import setup_logging
from app.utils.rng import STREAM_MC, make_rng
from latent_response.config_validator import ConfigValidator
from latent_response.data import Dataset, Standardizer, gen_factors, gen_helix, read_csv, write_csv
from latent_response.error_handler import (
    EXIT_OK,
    EXIT_USAGE,
    CommandRunner,
    DataError,
    ErrorTracker,
    TrainingDivergedError,
    UsageError,
)
from latent_response.geometry import (
    divergence,
    eval_grid,
    export_map,
    fraction_in_positive_curvature,
    mean_curvature,
    negative_fraction,
    norm_map,
    posterior_density,
    read_map_csv,
    write_field_csv,
)
from latent_response.interp import ambient_metrics, curvature_path, densify, straight_path, write_path_csv
from latent_response.response import (
    collapsed_dimensions,
    cds_details,
    conditioned_response_matrix,
    expansion_diagnostic,
    response_matrix,
    responsibility_matrix,
    write_matrix_csv,
)
from latent_response.vae import (
    VaeModel,
    create_model,
    encoder_mean,
    load_checkpoint,
    reconstruction_mse,
    save_checkpoint,
    train,
)

# 配置日志
logger = logging.getLogger(__name__)

# 恢复训练时从检查点继承的训练配置字段
RESUMED_FIELDS = ("batch_size", "lr", "beta", "latent_dim", "hidden", "log_every")

# 写入清单、重放时恢复的环境设置
REPLAYED_SETTINGS = ("MC_BLOCK_SIZE", "MC_WORKERS", "FD_STEP", "CURVATURE_EPS")


class CliArgumentParser(argparse.ArgumentParser):
    """参数错误抛出 UsageError，由 main 统一转换为退出码 1"""

    def error(self, message):
        raise UsageError(message)


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"需要逗号分隔的整数: {text}")


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"需要逗号分隔的数值: {text}")


def _flag(parser: argparse.ArgumentParser, *names: str, **kwargs) -> None:
    # 未给出的参数不出现在命名空间中，才能区分“显式参数”与默认值
    parser.add_argument(*names, default=argparse.SUPPRESS, **kwargs)


def _common(parser: argparse.ArgumentParser) -> None:
    _flag(parser, "--seed", type=int, help="根随机种子")
    _flag(parser, "--out", help="输出目录")
    parser.add_argument("--config", default=None, help="INI 配置文件，小节名为命令名")


def _map_flags(parser: argparse.ArgumentParser) -> None:
    _flag(parser, "--checkpoint", help="检查点文件")
    _flag(parser, "--dims", type=_int_list, help="两个切片维度，如 0,1")
    _flag(parser, "--range", type=_float_list, help="切片范围，如 --range=-3,3")
    _flag(parser, "--res", type=int, help="每轴网格节点数")
    _flag(parser, "--anchor", type=_float_list, help="其余坐标的锚点向量")
    _flag(parser, "--anchor-row", dest="anchor_row", type=int, help="以数据集某行的编码器均值作为锚点")
    _flag(parser, "--data", help="数据集 CSV（锚点行或后验密度）")
    _flag(parser, "--eps", type=float, help="曲率归一化阈值")


def build_parser() -> argparse.ArgumentParser:
    parser = CliArgumentParser(prog="latent-response", description="VAE 潜变量响应分析工具")
    parser.add_argument("--log-level", dest="log_level", default=None, help="日志级别")
    subparsers = parser.add_subparsers(dest="command")

    gen = subparsers.add_parser("gen-data", help="生成合成数据集")
    _flag(gen, "kind", nargs="?", choices=["helix", "factors"], help="数据集类型")
    _flag(gen, "--n", type=int, help="样本数（helix）")
    _flag(gen, "--sigma", type=float, help="观测噪声标准差")
    for name in ("a1", "a2", "a3", "omega"):
        _flag(gen, f"--{name}", type=float)
    _flag(gen, "--cardinalities", type=_int_list, help="各因子水平数（factors）")
    _flag(gen, "--obs-dim", dest="obs_dim", type=int)
    _flag(gen, "--code-dim", dest="code_dim", type=int)
    _flag(gen, "--hidden-dim", dest="hidden_dim", type=int)
    _flag(gen, "--embed-seed", dest="embed_seed", type=int)
    _flag(gen, "--repeats", type=int)
    _common(gen)

    train_parser = subparsers.add_parser("train", help="训练 VAE")
    _flag(train_parser, "--data", help="数据集 CSV")
    _flag(train_parser, "--preset", help=f"预设: {sorted(PRESETS)}")
    _flag(train_parser, "--resume", help="从检查点继续训练")
    _flag(train_parser, "--steps", type=int)
    _flag(train_parser, "--batch-size", dest="batch_size", type=int)
    _flag(train_parser, "--lr", type=float)
    _flag(train_parser, "--beta", type=float)
    _flag(train_parser, "--latent-dim", dest="latent_dim", type=int)
    _flag(train_parser, "--hidden", type=_int_list, help="隐藏层宽度，如 32,32,32,32")
    _flag(train_parser, "--log-every", dest="log_every", type=int)
    _common(train_parser)

    matrix = subparsers.add_parser("matrix", help="潜变量响应矩阵 M")
    _flag(matrix, "--checkpoint")
    _flag(matrix, "--data", help="聚合后验干预需要的数据集")
    _flag(matrix, "--n-samples", dest="n_samples", type=int)
    _flag(matrix, "--source", choices=["prior", "aggregate_posterior"])
    _common(matrix)

    for name, description in (("cond-matrix", "条件响应矩阵 M*"), ("cds", "因果解耦分数")):
        sub = subparsers.add_parser(name, help=description)
        _flag(sub, "--checkpoint")
        _flag(sub, "--data")
        _flag(sub, "--n-samples", dest="n_samples", type=int)
        _common(sub)

    responsibility = subparsers.add_parser("responsibility", help="线性责任矩阵基线")
    _flag(responsibility, "--checkpoint")
    _flag(responsibility, "--data")
    _flag(responsibility, "--alpha", type=float)
    _common(responsibility)

    for name, description in (("map", "散度、平均曲率与范数图"), ("field", "响应场箭头表")):
        sub = subparsers.add_parser(name, help=description)
        _map_flags(sub)
        _common(sub)

    interp = subparsers.add_parser("interp", help="直线与曲率引导插值")
    _map_flags(interp)
    _flag(interp, "--start", type=_float_list)
    _flag(interp, "--end", type=_float_list)
    _flag(interp, "--start-row", dest="start_row", type=int)
    _flag(interp, "--end-row", dest="end_row", type=int)
    _flag(interp, "--gamma", type=float)
    _flag(interp, "--waypoints", type=int)
    _flag(interp, "--curvature-map", dest="curvature_map", help="已导出的曲率图 CSV")
    _common(interp)

    diagnose = subparsers.add_parser("diagnose", help="一阶展开诊断")
    _flag(diagnose, "--checkpoint")
    _flag(diagnose, "--data")
    _flag(diagnose, "--row", type=int)
    _flag(diagnose, "--noise-scale", dest="noise_scale", type=float)
    _common(diagnose)

    sweep = subparsers.add_parser("sweep", help="β × 种子网格上的训练 + CDS")
    _flag(sweep, "--data")
    _flag(sweep, "--betas", type=_float_list)
    _flag(sweep, "--seeds", type=_int_list)
    _flag(sweep, "--latent-dim", dest="latent_dim", type=int)
    _flag(sweep, "--hidden", type=_int_list)
    _flag(sweep, "--steps", type=int)
    _flag(sweep, "--batch-size", dest="batch_size", type=int)
    _flag(sweep, "--lr", type=float)
    _flag(sweep, "--n-samples", dest="n_samples", type=int)
    _common(sweep)

    rerun = subparsers.add_parser("rerun", help="按清单重放命令")
    rerun.add_argument("manifest", help="manifest.json 路径")
    rerun.add_argument("--out", default=None, help="新的输出目录")

    serve = subparsers.add_parser("serve", help="启动 HTTP 服务")
    _flag(serve, "--checkpoint")
    _flag(serve, "--host")
    _flag(serve, "--port", type=int)
    _common(serve)

    return parser


def resolve_config(command: str, flags: Dict[str, Any], config_path: Optional[str] = None) -> CommandConfig:
    """按 默认值 < 预设 < 配置文件 < 命令行参数 合并并验证命令配置

    Raises:
        UsageError: 配置无效
    """
    file_values = ConfigValidator().section_values(config_path, command) if config_path else {}
    values: Dict[str, Any] = {}
    if command == "train":
        resume = flags.get("resume") or file_values.get("resume")
        if resume:
            _, checkpoint = load_checkpoint(resume)
            values.update({k: v for k, v in (checkpoint.train or {}).items() if k in RESUMED_FIELDS})
        preset = flags.get("preset") or file_values.get("preset")
        if preset in PRESETS:
            values.update(PRESETS[preset])
    values.update(file_values)
    values.update(flags)
    try:
        return COMMAND_MODELS[command](**values)
    except ValidationError as e:
        errors = [f"{error['loc'][0]}: {error['msg']}" for error in json.loads(e.json())]
        raise UsageError(f"{command} 配置无效: {'; '.join(errors)}")


def _write_json(path: str, model: BaseModel) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(model.json(indent=2, sort_keys=True))
        f.write("\n")


def _load_dataset(path: str) -> Dataset:
    return read_csv(path)


def _labels(prefix: str, count: int) -> List[str]:
    return [f"{prefix}{k + 1}" for k in range(count)]


def cmd_gen_data(cfg: GenDataCommand, out: str) -> Dict[str, Any]:
    dataset = gen_helix(cfg.helix_config()) if cfg.kind == "helix" else gen_factors(cfg.factor_config())
    path = os.path.join(out, "data.csv")
    write_csv(path, dataset)
    report = DatasetReport(kind=cfg.kind, n=dataset.n, obs_dim=dataset.obs_dim,
                           factor_names=dataset.factor_names or [],
                           factor_cardinalities=dataset.factor_cardinalities or [])
    _write_json(os.path.join(out, "dataset.json"), report)
    return {"data": path, "n": dataset.n, "obs_dim": dataset.obs_dim}


def _write_losses(path: str, losses: List[float], steps_before: int) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("step,loss\n")
        for step, loss in enumerate(losses, start=steps_before + 1):
            f.write(f"{step},{format(loss, '.17g')}\n")


def cmd_train(cfg: TrainCommand, out: str) -> Dict[str, Any]:
    dataset = _load_dataset(cfg.data)
    train_config = cfg.train_config()
    if cfg.resume:
        model, checkpoint = load_checkpoint(cfg.resume)
        steps_before = checkpoint.steps_trained
        previous_loss = checkpoint.final_loss
    else:
        model = create_model(dataset.obs_dim, train_config, Standardizer.fit(dataset.observations))
        steps_before = 0
        previous_loss = None

    try:
        result = train(model, dataset, train_config, start_step=steps_before)
    except TrainingDivergedError as e:
        # 发散前的损失轨迹照常写出
        _write_losses(os.path.join(out, "losses.csv"), e.trace, steps_before)
        raise
    final_loss = result.final_loss if result.losses else previous_loss
    steps_trained = steps_before + len(result.losses)
    checkpoint_path = os.path.join(out, "checkpoint.json")
    save_checkpoint(checkpoint_path, result.model, steps_trained, final_loss, train_config.dict())
    _write_losses(os.path.join(out, "losses.csv"), result.losses, steps_before)

    mse = reconstruction_mse(result.model, dataset.observations)
    _write_json(os.path.join(out, "train.json"),
                TrainReport(steps_trained=steps_trained, final_loss=final_loss, reconstruction_mse=mse,
                            latent_dim=result.model.latent_dim, beta=result.model.beta))
    return {"checkpoint": checkpoint_path, "final_loss": final_loss, "reconstruction_mse": mse}


def cmd_matrix(cfg: MatrixCommand, out: str) -> Dict[str, Any]:
    model, _ = load_checkpoint(cfg.checkpoint)
    dataset = _load_dataset(cfg.data) if cfg.data else None
    matrix = response_matrix(model, cfg.n_samples, cfg.source, cfg.seed, dataset)
    labels = _labels("z", model.latent_dim)
    collapsed = collapsed_dimensions(matrix)
    write_matrix_csv(os.path.join(out, "matrix.csv"), matrix.entries, labels, labels)
    report = MatrixReport(kind="response", row_labels=labels, col_labels=labels,
                          entries=matrix.entries.tolist(), seed=cfg.seed, n_samples=cfg.n_samples,
                          source=matrix.intervention_source.value, collapsed_dims=collapsed)
    _write_json(os.path.join(out, "matrix.json"), report)
    return {"matrix": matrix.entries.tolist(), "collapsed_dims": collapsed}


def _conditioned_report(cfg: CondMatrixCommand, out: str):
    model, _ = load_checkpoint(cfg.checkpoint)
    dataset = _load_dataset(cfg.data)
    dataset.require_labels("条件响应矩阵")
    matrix = conditioned_response_matrix(model, dataset, cfg.n_samples, cfg.seed)
    col_labels = _labels("z", model.latent_dim)
    write_matrix_csv(os.path.join(out, "cond_matrix.csv"), matrix.entries, matrix.factor_names, col_labels)
    report = MatrixReport(kind="conditioned_response", row_labels=matrix.factor_names, col_labels=col_labels,
                          entries=matrix.entries.tolist(), seed=cfg.seed, n_samples=cfg.n_samples,
                          sample_counts=matrix.sample_counts.tolist())
    return matrix, report


def cmd_cond_matrix(cfg: CondMatrixCommand, out: str) -> Dict[str, Any]:
    matrix, report = _conditioned_report(cfg, out)
    _write_json(os.path.join(out, "cond_matrix.json"), report)
    return {"matrix": matrix.entries.tolist()}


def cmd_cds(cfg: CondMatrixCommand, out: str) -> Dict[str, Any]:
    matrix, report = _conditioned_report(cfg, out)
    result = cds_details(matrix)
    _write_json(os.path.join(out, "cds.json"),
                CdsReport(cds=result.score, cds_raw=result.raw, factor_count=matrix.entries.shape[0],
                          dropped_columns=result.dropped_columns, matrix=report))
    return {"cds": result.score, "cds_raw": result.raw}


def cmd_responsibility(cfg: ResponsibilityCommand, out: str) -> Dict[str, Any]:
    model, _ = load_checkpoint(cfg.checkpoint)
    dataset = _load_dataset(cfg.data)
    matrix = responsibility_matrix(model, dataset, cfg.alpha, cfg.seed)
    col_labels = _labels("z", model.latent_dim)
    write_matrix_csv(os.path.join(out, "responsibility.csv"), matrix.entries, matrix.factor_names, col_labels)
    score = score_raw = None
    if matrix.entries.shape[0] >= 2 and np.any(matrix.entries > 0):
        result = cds_details(matrix)
        score, score_raw = result.score, result.raw
    report = MatrixReport(kind="responsibility", row_labels=matrix.factor_names, col_labels=col_labels,
                          entries=matrix.entries.tolist(), seed=cfg.seed,
                          notes="L1 正则线性模型的简化责任矩阵，不是参考 DCI 实现")
    _write_json(os.path.join(out, "responsibility.json"),
                ResponsibilityReport(score=score, score_raw=score_raw, degenerate_factors=matrix.degenerate_factors,
                                     alpha=cfg.alpha, matrix=report))
    return {"score": score, "degenerate_factors": matrix.degenerate_factors}


def _anchor(cfg: MapCommand, model: VaeModel, dataset: Optional[Dataset]) -> Optional[np.ndarray]:
    if cfg.anchor is not None:
        return np.asarray(cfg.anchor, dtype=np.float64)
    if cfg.anchor_row is not None:
        return _row_mean(model, dataset, cfg.anchor_row, "锚点")
    return None


def _row_mean(model: VaeModel, dataset: Optional[Dataset], row: int, name: str) -> np.ndarray:
    if dataset is None:
        raise UsageError(f"使用数据行作为{name}需要 --data")
    if not 0 <= row < dataset.n:
        raise DataError(f"{name}行号越界: {row}，数据集共 {dataset.n} 行")
    return encoder_mean(model, dataset.observations[row])


def _grid(cfg: MapCommand, model: VaeModel, dataset: Optional[Dataset]):
    return eval_grid(model, cfg.dims, _anchor(cfg, model, dataset), cfg.range, cfg.res)


def cmd_map(cfg: MapCommand, out: str) -> Dict[str, Any]:
    model, _ = load_checkpoint(cfg.checkpoint)
    dataset = _load_dataset(cfg.data) if cfg.data else None
    grid = _grid(cfg, model, dataset)
    div_map = divergence(grid)
    curvature = mean_curvature(grid, cfg.eps)
    maps = [div_map, curvature, norm_map(grid)]

    posterior_fraction = None
    if dataset is not None:
        means = encoder_mean(model, dataset.observations)
        maps.append(posterior_density(grid, means))
        posterior_fraction = fraction_in_positive_curvature(curvature, means)

    stats = []
    for scalar_map in maps:
        name = scalar_map.kind.value
        export_map(scalar_map, os.path.join(out, f"{name}.csv"), MapFormat.CSV)
        export_map(scalar_map, os.path.join(out, f"{name}.pgm"), MapFormat.PGM)
        minimum, maximum = scalar_map.extrema()
        stats.append(MapStats(kind=name, minimum=minimum, maximum=maximum,
                              singular_cells=int(scalar_map.singular.sum())))
    write_field_csv(os.path.join(out, "field.csv"), grid)

    try:
        negative = negative_fraction(div_map)
    except DataError:
        negative = None
    report = MapReport(dims=list(grid.dims), anchor=grid.anchor.tolist(), ranges=[list(r) for r in grid.ranges],
                       resolution=grid.resolution, eps=cfg.eps, maps=stats,
                       negative_divergence_fraction=negative, posterior_in_positive_curvature=posterior_fraction)
    _write_json(os.path.join(out, "map.json"), report)
    return {"maps": [s.kind for s in stats], "negative_divergence_fraction": negative,
            "posterior_in_positive_curvature": posterior_fraction}


def cmd_field(cfg: MapCommand, out: str) -> Dict[str, Any]:
    model, _ = load_checkpoint(cfg.checkpoint)
    dataset = _load_dataset(cfg.data) if cfg.data else None
    grid = _grid(cfg, model, dataset)
    path = os.path.join(out, "field.csv")
    write_field_csv(path, grid)
    return {"field": path, "nodes": grid.resolution ** 2}


def _endpoint(vector, row, model: VaeModel, dataset: Optional[Dataset], name: str) -> np.ndarray:
    if vector is not None:
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape[0] != model.latent_dim:
            raise DataError(f"{name}维度 {vector.shape[0]} 与潜变量维度 {model.latent_dim} 不一致")
        return vector
    if row is not None:
        return _row_mean(model, dataset, row, name)
    raise UsageError(f"必须给出{name}坐标或数据行")


def _path_report(path, metrics) -> PathReport:
    return PathReport(method=path.method.value, waypoint_count=len(path), cost=path.cost,
                      latent_length=path.latent_length, ambient_length=metrics.total_length,
                      max_jump=metrics.max_jump)


def cmd_interp(cfg: InterpCommand, out: str) -> Dict[str, Any]:
    model, _ = load_checkpoint(cfg.checkpoint)
    dataset = _load_dataset(cfg.data) if cfg.data else None
    start = _endpoint(cfg.start, cfg.start_row, model, dataset, "起点")
    end = _endpoint(cfg.end, cfg.end_row, model, dataset, "终点")
    if cfg.curvature_map:
        curvature = read_map_csv(cfg.curvature_map)
    else:
        curvature = mean_curvature(_grid(cfg, model, dataset), cfg.eps)

    straight = straight_path(start, end, cfg.waypoints)
    guided = curvature_path(curvature, start, end, cfg.gamma)
    # 引导路径按直线路径的航点间距加密，两者的 max_jump 才可比较
    spacing = straight.latent_length / (cfg.waypoints - 1)
    if spacing > 0:
        guided = densify(guided, spacing)
    straight_metrics = ambient_metrics(model, straight)
    guided_metrics = ambient_metrics(model, guided)
    write_path_csv(os.path.join(out, "straight_path.csv"), straight, straight_metrics)
    write_path_csv(os.path.join(out, "guided_path.csv"), guided, guided_metrics)

    report = InterpReport(start=start.tolist(), end=end.tolist(), gamma=cfg.gamma,
                          straight=_path_report(straight, straight_metrics),
                          guided=_path_report(guided, guided_metrics))
    _write_json(os.path.join(out, "interp.json"), report)
    return {"straight_max_jump": straight_metrics.max_jump, "guided_max_jump": guided_metrics.max_jump}


def noise_direction(seed: int, dim: int, scale: float) -> np.ndarray:
    """诊断用的外生噪声：mc 子流上的随机方向，长度为 scale"""
    direction = make_rng(seed, STREAM_MC, 3).standard_normal(dim)
    return scale * direction / np.linalg.norm(direction)


def cmd_diagnose(cfg: DiagnoseCommand, out: str) -> Dict[str, Any]:
    model, _ = load_checkpoint(cfg.checkpoint)
    dataset = _load_dataset(cfg.data)
    if not 0 <= cfg.row < dataset.n:
        raise DataError(f"行号越界: {cfg.row}，数据集共 {dataset.n} 行")
    x = dataset.observations[cfg.row]
    u = noise_direction(cfg.seed, model.latent_dim, cfg.noise_scale)
    full = expansion_diagnostic(model, x, u)
    half = expansion_diagnostic(model, x, u / 2.0)
    ratio = full.residual_norm / half.residual_norm if half.residual_norm > 0 else None
    report = ExpansionReportModel(
        row=cfg.row, noise_scale=cfg.noise_scale, s=full.s.tolist(), s_hat=full.s_hat.tolist(),
        term1=full.term1.tolist(), term2=full.term2.tolist(), term3=full.term3.tolist(),
        term2_linear=full.term2_linear.tolist(),
        residual=full.residual.tolist(), residual_norm=full.residual_norm, epsilon=full.epsilon.tolist(),
        epsilon_norm=float(np.linalg.norm(full.epsilon)), residual_norm_half=half.residual_norm,
        residual_ratio=ratio)
    _write_json(os.path.join(out, "diagnose.json"), report)

    for key in ("s", "s_hat", "term1", "term2", "term2_linear", "term3", "residual"):
        print(f"{key}: {' '.join(format(v, '.6g') for v in getattr(report, key))}")
    print(f"residual_norm: {report.residual_norm:.6g}")
    print(f"residual_norm_half: {report.residual_norm_half:.6g}")
    print(f"residual_ratio: {'n/a' if ratio is None else format(ratio, '.6g')}")
    print(f"epsilon_norm: {report.epsilon_norm:.6g}")
    return {"residual_norm": full.residual_norm, "residual_ratio": ratio}


def cmd_sweep(cfg: SweepCommand, out: str) -> Dict[str, Any]:
    dataset = _load_dataset(cfg.data)
    dataset.require_labels("β 扫描")
    standardizer = Standardizer.fit(dataset.observations)
    rows = []
    for beta in cfg.betas:
        for seed in cfg.seeds:
            train_config = TrainConfig(steps=cfg.steps, batch_size=cfg.batch_size, lr=cfg.lr, beta=beta,
                                       seed=seed, latent_dim=cfg.latent_dim, hidden=cfg.hidden)
            result = train(create_model(dataset.obs_dim, train_config, standardizer), dataset, train_config)
            run_dir = os.path.join(out, "runs", f"beta{beta:g}_seed{seed}")
            save_checkpoint(os.path.join(run_dir, "checkpoint.json"), result.model, len(result.losses),
                            result.final_loss, train_config.dict())
            scores = cds_details(conditioned_response_matrix(result.model, dataset, cfg.n_samples, seed))
            logger.info(f"β={beta:g}, 种子={seed}: CDS={scores.score:.4f}")
            rows.append(SweepRow(beta=beta, seed=seed, cds=scores.score, cds_raw=scores.raw,
                                 final_loss=result.final_loss if result.final_loss is not None else float("nan")))

    means = {f"{beta:g}": float(np.mean([r.cds for r in rows if r.beta == beta])) for beta in cfg.betas}
    rho, pvalue = spearmanr(cfg.betas, [means[f"{beta:g}"] for beta in cfg.betas])
    rho = None if np.isnan(rho) else float(rho)
    pvalue = None if np.isnan(pvalue) else float(pvalue)

    with open(os.path.join(out, "sweep.csv"), "w", encoding="utf-8") as f:
        f.write("beta,seed,cds,cds_raw,final_loss\n")
        for r in rows:
            f.write(",".join([format(r.beta, ".17g"), str(r.seed), format(r.cds, ".17g"),
                              format(r.cds_raw, ".17g"), format(r.final_loss, ".17g")]) + "\n")
    _write_json(os.path.join(out, "sweep.json"),
                SweepReport(rows=rows, mean_cds=means, spearman_rho=rho, spearman_pvalue=pvalue))
    return {"mean_cds": means, "spearman_rho": rho}


def cmd_serve(cfg: ServeCommand) -> Dict[str, Any]:
    import uvicorn

    from main import create_app

    if cfg.checkpoint:
        settings.CHECKPOINT_PATH = cfg.checkpoint
    host = cfg.host or settings.HOST
    port = cfg.port or settings.PORT
    logger.info(f"启动服务 {host}:{port}，检查点 {settings.CHECKPOINT_PATH or '(未配置)'}")
    uvicorn.run(create_app(), host=host, port=port)
    return {}


HANDLERS: Dict[str, Callable[[Any, str], Dict[str, Any]]] = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "matrix": cmd_matrix,
    "cond-matrix": cmd_cond_matrix,
    "cds": cmd_cds,
    "responsibility": cmd_responsibility,
    "map": cmd_map,
    "field": cmd_field,
    "interp": cmd_interp,
    "diagnose": cmd_diagnose,
    "sweep": cmd_sweep,
}


def run_command(command: str, cfg: CommandConfig) -> Dict[str, Any]:
    """执行命令并写出清单"""
    out = cfg.out or os.path.join(settings.OUTPUT_DIR, command)
    os.makedirs(out, exist_ok=True)
    logger.info(f"执行命令 {command}，输出目录 {out}")
    summary = HANDLERS[command](cfg, out)
    manifest = Manifest(command=command, code_version=__version__, seed=cfg.seed,
                        config=json.loads(cfg.json()),
                        settings={name: getattr(settings, name) for name in REPLAYED_SETTINGS})
    _write_json(os.path.join(out, "manifest.json"), manifest)
    return {"out": out, **summary}


def rerun(manifest_path: str, out: Optional[str] = None) -> Dict[str, Any]:
    """按清单重放命令；out 为空时写回清单记录的输出目录"""
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = Manifest.parse_obj(json.load(f))
    except OSError as e:
        raise UsageError(f"无法读取清单 {manifest_path}: {e}")
    except (ValueError, ValidationError) as e:
        raise UsageError(f"清单格式非法 {manifest_path}: {e}")
    if manifest.command not in HANDLERS:
        raise UsageError(f"清单中的命令无法重放: {manifest.command}")
    if manifest.code_version != __version__:
        logger.warning(f"清单代码版本 {manifest.code_version} 与当前版本 {__version__} 不一致")
    config = dict(manifest.config)
    if out:
        config["out"] = out
    try:
        cfg = COMMAND_MODELS[manifest.command](**config)
    except ValidationError as e:
        raise UsageError(f"清单配置无效: {e}")
    with _replayed_settings(manifest.settings):
        return run_command(manifest.command, cfg)


@contextmanager
def _replayed_settings(values: Dict[str, Any]):
    """临时套用清单记录的环境设置，结束后恢复"""
    unknown = sorted(set(values) - set(REPLAYED_SETTINGS))
    if unknown:
        logger.warning(f"清单中包含无法重放的设置，已忽略: {unknown}")
    previous = {name: getattr(settings, name) for name in REPLAYED_SETTINGS if name in values}
    for name in previous:
        if values[name] != previous[name]:
            logger.info(f"重放设置 {name}={values[name]}（当前为 {previous[name]}）")
        setattr(settings, name, values[name])
    try:
        yield
    finally:
        for name, value in previous.items():
            setattr(settings, name, value)


def _dispatch(args: argparse.Namespace) -> Dict[str, Any]:
    if args.command == "rerun":
        return rerun(args.manifest, args.out)
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "log_level")}
    cfg = resolve_config(args.command, flags, args.config)
    if args.command == "serve":
        return cmd_serve(cfg)
    return run_command(args.command, cfg)


def main(argv: Optional[List[str]] = None) -> int:
    """命令行主函数，返回退出码"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"用法错误: {e}", file=sys.stderr)
        return EXIT_USAGE

    setup_logging(level=args.log_level)
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE

    runner = CommandRunner(ErrorTracker(settings.ERROR_LOG_DIR))
    result = runner.guarded(args.command)(_dispatch)(args)
    if not result.success:
        print(f"错误: {result.error}", file=sys.stderr)
        return result.exit_code
    print(json.dumps(result.data, ensure_ascii=False, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
