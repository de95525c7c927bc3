"""DDFusion 统一 CLI 入口，整合批处理命令与配置助手。"""

from __future__ import annotations

import functools
from typing import Callable, Sequence

import click
from rich.console import Console

from ddfusion_helper import main as helper_main

from .app import DECOMPOSE_MODES, STAGES, DDFusionApp
from .errors import DDFusionError
from .models import ORIENTATIONS

DEFAULT_CONFIG_PATH = "ddfusion.config.toml"
GRADCHECK_FAILED_EXIT = 3


def _handle_errors(func: Callable) -> Callable:
    """把 ``DDFusionError`` 转换为标准错误输出与对应的退出码。"""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        ctx = click.get_current_context()
        try:
            return func(*args, **kwargs)
        except DDFusionError as error:
            click.echo(f"Error: {error}", err=True)
            ctx.exit(error.exit_code)

    return wrapper


def _app(ctx: click.Context, require_config: bool = False) -> DDFusionApp:
    return DDFusionApp(ctx.obj["config_path"], require_config=require_config, log_level=ctx.obj["log_level"])


def _build_helper_args(config_path: str, args: Sequence[str]) -> list[str]:
    """
    构造传递给配置助手的参数列表。

    :param config_path: 配置文件路径。
    :type config_path: str
    :param args: 透传的子命令与参数。
    :type args: Sequence[str]
    :returns: 适配 ``ddfusion_helper`` 的参数序列。
    :rtype: list[str]
    """

    return ["--config", config_path, *args]


@click.group()
@click.option(
    "--config",
    "config_path",
    default=DEFAULT_CONFIG_PATH,
    show_default=True,
    help="配置文件路径",
)
@click.option("--log-level", default="INFO", show_default=True, help="日志级别")
@click.pass_context
def cli(ctx: click.Context, config_path: str, log_level: str) -> None:
    """
    DDFusion 退化解耦红外/可见光图像融合
    """

    ctx.ensure_object(dict)
    ctx.obj["config_path"] = config_path
    ctx.obj["log_level"] = log_level


@cli.command()
@click.argument("in_dir", type=click.Path(file_okay=False))
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--sigma", type=float, default=None, help="高斯噪声 σ（0-255 标度），缺省时逐文件抽取")
@click.option("--stripe", type=float, default=None, help="条纹噪声幅度（0-255 标度），缺省时逐文件抽取")
@click.option("--orientation", type=click.Choice(ORIENTATIONS), default=None, help="条纹方向")
@click.option("--gamma", type=float, default=None, help="可见光低照度 γ")
@click.option("--seed", type=int, default=None, help="随机种子")
@click.option("--jobs", type=int, default=1, show_default=True, help="并行处理的图像数")
@click.pass_context
@_handle_errors
def degrade(ctx: click.Context, in_dir: str, out_dir: str, sigma, stripe, orientation, gamma, seed, jobs: int) -> None:
    """
    合成退化测试集
    """

    manifest = _app(ctx).degrade_directory(in_dir, out_dir, sigma, stripe, orientation, gamma, seed, jobs)
    click.echo(f"degraded {len(manifest)} pairs -> {out_dir}")


@cli.command()
@click.argument("image", type=click.Path(dir_okay=False))
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--mode", type=click.Choice(DECOMPOSE_MODES), default="dct", show_default=True)
@click.option("--tau", type=float, default=None, help="DCT 低频截止阈值")
@click.option("--sigma", type=float, default=None, help="Retinex 照度模糊 σ")
@click.pass_context
@_handle_errors
def decompose(ctx: click.Context, image: str, out_dir: str, mode: str, tau, sigma) -> None:
    """
    分解单幅图像并输出分量
    """

    for path in _app(ctx).decompose_image(image, out_dir, mode=mode, tau=tau, sigma=sigma):
        click.echo(str(path))


@cli.command()
@click.option("--stage", type=click.Choice(STAGES), default="all", show_default=True)
@click.option("--resume", is_flag=True, help="从已有检查点继续")
@click.pass_context
@_handle_errors
def train(ctx: click.Context, stage: str, resume: bool) -> None:
    """
    两阶段训练
    """

    app = _app(ctx, require_config=True)
    for number, result in app.train(stage=stage, resume=resume).items():
        click.echo(f"stage {number}: {len(result.log)} steps, checkpoint steps {result.checkpoint.steps}")


@cli.command()
@click.argument("checkpoint", type=click.Path(dir_okay=False))
@click.argument("ir_dir", type=click.Path(file_okay=False))
@click.argument("vi_dir", type=click.Path(file_okay=False))
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--jobs", type=int, default=1, show_default=True)
@click.pass_context
@_handle_errors
def fuse(ctx: click.Context, checkpoint: str, ir_dir: str, vi_dir: str, out_dir: str, jobs: int) -> None:
    """
    融合图像对
    """

    paths = _app(ctx).fuse_directory(checkpoint, ir_dir, vi_dir, out_dir, jobs=jobs)
    click.echo(f"fused {len(paths)} pairs -> {out_dir}")


@cli.command()
@click.argument("ir_dir", type=click.Path(file_okay=False))
@click.argument("vi_dir", type=click.Path(file_okay=False))
@click.argument("fused_dir", type=click.Path(file_okay=False))
@click.argument("out_csv", type=click.Path(dir_okay=False))
@click.option("--markdown", type=click.Path(dir_okay=False), default=None, help="额外输出 Markdown 摘要")
@click.option("--jobs", type=int, default=1, show_default=True)
@click.pass_context
@_handle_errors
def evaluate(ctx: click.Context, ir_dir: str, vi_dir: str, fused_dir: str, out_csv: str, markdown, jobs: int) -> None:
    """
    计算融合质量指标
    """

    report = _app(ctx).evaluate_directories(ir_dir, vi_dir, fused_dir, out_csv, markdown=markdown, jobs=jobs)
    Console().print(report.to_table())


@cli.command()
@click.option("--all", "run_all", is_flag=True, help="校验全部损失与模块")
@click.option("--loss", default=None, help="只校验指定损失")
@click.option("--seed", type=int, default=0, show_default=True)
@click.pass_context
@_handle_errors
def gradcheck(ctx: click.Context, run_all: bool, loss: str | None, seed: int) -> None:
    """
    梯度校验
    """

    if run_all == (loss is not None):
        raise click.UsageError("需要且只能指定 --all 或 --loss 之一")
    results = _app(ctx).gradcheck(loss=None if run_all else loss, seed=seed)
    for result in results:
        status = "ok" if result.passed else "FAIL"
        click.echo(f"{result.name:<14} error={result.error:.3e} {status}")
    if not all(result.passed for result in results):
        ctx.exit(GRADCHECK_FAILED_EXIT)


@cli.command(context_settings={"ignore_unknown_options": True, "allow_extra_args": True})
@click.pass_context
def config(ctx: click.Context) -> None:
    """
    配置 DDFusion
    """

    ctx.exit(helper_main(_build_helper_args(ctx.obj["config_path"], ctx.args)))


if __name__ == "__main__":
    cli()
