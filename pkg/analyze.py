#!/usr/bin/env python3
"""
单源多模态生存泛化实验系统
主程序和测试入口
"""

import functools
import logging
import sys
import traceback
from pathlib import Path
from typing import Optional, Tuple

import click

# 设置日志
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)

from cade import test_cade_properties  # noqa: E402
from config import config_hash, dump_config, load_config  # noqa: E402
from dataio import default_benchmark, save_domain  # noqa: E402
from errors import ConfigError, SurvDGError  # noqa: E402
from fusion import load_checkpoint, save_checkpoint, test_full_model_gradients  # noqa: E402
from harness import (  # noqa: E402
    ensure_output_dir,
    evaluate_checkpoint,
    load_datasets,
    run_ablation,
    run_experiment,
    run_grid,
    run_rotation,
    train,
)
from models import CellStat, ExperimentConfig  # noqa: E402
from report_generator import ReportGenerator, emit_report, load_report_bundle  # noqa: E402
from sdir import test_dirac_limits, test_mask_statistics  # noqa: E402
from survmetrics import test_metric_oracles  # noqa: E402
from tensorcore import test_gradient_integrity  # noqa: E402


logger = logging.getLogger(__name__)

DEFAULT_GRID = "0.1,0.3,0.5,0.7,0.9"


def setup_debug_logging():
    """设置调试模式日志"""
    logging.getLogger().setLevel(logging.DEBUG)


def handle_errors(func):
    """领域错误 → ❌ 类别: 信息，并以对应退出码结束"""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except SurvDGError as e:
            print(f"❌ {e.category}: {e}")
            if getattr(e, "terms", None):
                for name, value in e.terms.items():
                    print(f"   {name} = {value!r}")
            if kwargs.get("debug"):
                traceback.print_exc()
            sys.exit(e.exit_code)

    return wrapper


def experiment_options(func):
    """--config / --seed / --out / --debug 公共选项"""
    func = click.option('--debug', is_flag=True, help='开启调试模式')(func)
    func = click.option('--out', type=str, default=None, help='输出目录 (覆盖 OUTPUT_DIR)')(func)
    func = click.option('--seed', type=int, default=None, help='只运行这一个种子 (覆盖 SEEDS)')(func)
    func = click.option('--config', 'config_path', type=click.Path(), default=None, help='KEY=value 配置文件')(func)
    return func


def prepare(config_path: Optional[str], seed: Optional[int], out: Optional[str], debug: bool) -> Tuple[ExperimentConfig, Path]:
    """加载配置并在任何训练开始前检查输出目录"""
    if debug:
        setup_debug_logging()
    overrides = {"output_dir": out}
    if seed is not None:
        overrides["seeds"] = (seed,)
    config = load_config(config_path, overrides)
    output_dir = ensure_output_dir(config.output_dir)
    (output_dir / "config.txt").write_text(dump_config(config), encoding="utf-8")
    print(f"⚙️  配置 {config_hash(config)}: source={config.source_domain} targets={','.join(config.target_domains)} "
          f"sdir={config.sdir_on} cade={config.cade_on} seeds={list(config.seeds)}")
    return config, output_dir


def parse_grid(raw: str) -> Tuple[float, ...]:
    try:
        return tuple(float(v) for v in raw.split(",") if v.strip())
    except ValueError as e:
        raise click.BadParameter(f"expected comma-separated numbers, got {raw!r}") from e


@click.command()
@click.option('--domains', type=click.Choice(['2', '4']), default=None, help='合成基准的域数量')
@click.option('--samples', type=int, default=None, help='每个域的样本数')
@experiment_options
@handle_errors
def generate(domains, samples, config_path, seed, out, debug):
    """生成合成域偏移基准数据集"""
    if debug:
        setup_debug_logging()
    config = load_config(config_path, {"output_dir": out})
    n_domains = int(domains) if domains else config.benchmark_domains
    n_samples = samples or config.benchmark_samples
    data_seed = config.benchmark_seed if seed is None else seed
    output_dir = ensure_output_dir(config.output_dir)

    print(f"🧬 生成 {n_domains} 个域，每域 {n_samples} 个样本 (seed={data_seed})")
    for domain_id, batch in default_benchmark(n_domains, n_samples, data_seed).items():
        schema = save_domain(batch, output_dir / domain_id)
        print(f"   ✅ {domain_id}: {batch.n_samples} 个样本 → {schema.root}")
    print(f"📁 数据集保存在: {output_dir}")


@click.command(name='train')
@experiment_options
@handle_errors
def train_command(config_path, seed, out, debug):
    """在源域上训练，写出检查点和训练日志"""
    config, output_dir = prepare(config_path, seed, out, debug)
    chash = config_hash(config)
    datasets = load_datasets(config)
    generator = ReportGenerator(output_dir, chash)
    for s in config.seeds:
        model = train(config, datasets[config.source_domain], s, progress=True)
        digest = save_checkpoint(model.params, output_dir / "checkpoints" / f"seed_{s}.json", chash)
        generator.write_training_log(model.log)
        final = model.log.epochs[-1]
        print(f"   ✅ seed {s}: 最终损失 {final.total:.4f}，检查点 sha256 {digest[:16]}")


@click.command(name='evaluate')
@click.argument('checkpoint', type=click.Path())
@experiment_options
@handle_errors
def evaluate_command(checkpoint, config_path, seed, out, debug):
    """用已保存的检查点评估源域和目标域"""
    config, output_dir = prepare(config_path, seed, out, debug)
    params, trained_hash = load_checkpoint(checkpoint)
    if trained_hash != config_hash(config):
        raise ConfigError(
            f"checkpoint {checkpoint} was trained with config {trained_hash}, "
            f"but the current config hashes to {config_hash(config)}"
        )
    report = evaluate_checkpoint(config, params, seed=config.seeds[0])
    emit_report([report], output_dir)
    print_report_summary(report)


@click.command()
@experiment_options
@handle_errors
def run(config_path, seed, out, debug):
    """完整实验: 每个种子训练 + 评估 + 报告"""
    config, output_dir = prepare(config_path, seed, out, debug)
    report = run_experiment(config, checkpoint_dir=output_dir / "checkpoints", progress=True)
    emit_report([report], output_dir)
    print_report_summary(report)


@click.command()
@experiment_options
@handle_errors
def ablate(config_path, seed, out, debug):
    """消融实验: backbone / +SDIR / +CADE / +SDIR+CADE"""
    config, output_dir = prepare(config_path, seed, out, debug)
    table, reports = run_ablation(config, progress=True)
    emit_report(list(reports.values()), output_dir, tables=[table], config_hash=config_hash(config))
    print(f"🎉 消融表格: {len(table.row_labels)} 行 × {len(table.column_labels)} 列")


@click.command()
@click.option('--alphas', default=DEFAULT_GRID, help='α 扫描值 (γ 固定为 GRID_FIXED_GAMMA)')
@click.option('--gammas', default=DEFAULT_GRID, help='γ 扫描值 (α 固定为 GRID_FIXED_ALPHA)')
@experiment_options
@handle_errors
def grid(alphas, gammas, config_path, seed, out, debug):
    """α / γ 网格实验"""
    config, output_dir = prepare(config_path, seed, out, debug)
    alpha_table, gamma_table, reports = run_grid(config, parse_grid(alphas), parse_grid(gammas), progress=True)
    emit_report(list(reports.values()), output_dir, tables=[alpha_table, gamma_table], config_hash=config_hash(config))
    print(f"🎉 网格实验完成: {len(alpha_table.row_labels)} 个 α，{len(gamma_table.row_labels)} 个 γ")


@click.command()
@experiment_options
@handle_errors
def rotate(config_path, seed, out, debug):
    """轮换源域: 每个域依次作为源域"""
    config, output_dir = prepare(config_path, seed, out, debug)
    table, reports = run_rotation(config, progress=True)
    emit_report(list(reports.values()), output_dir, tables=[table], config_hash=config_hash(config))
    print(f"🎉 轮换实验完成: {len(reports)} 个源域")


@click.command()
@click.argument('run_report', type=click.Path())
@click.option('--out', type=str, default=None, help='输出目录 (默认与 run_report.json 相同)')
@click.option('--language', type=click.Choice(['zh', 'en']), default='zh', help='报告语言 (zh: 中文, en: English)')
@click.option('--debug', is_flag=True, help='开启调试模式')
@handle_errors
def report(run_report, out, language, debug):
    """从 run_report.json 重新生成全部报告文件"""
    if debug:
        setup_debug_logging()
    reports, tables, chash = load_report_bundle(run_report)
    source = Path(run_report)
    output_dir = ensure_output_dir(out or (source if source.is_dir() else source.parent))
    emit_report(reports, output_dir, tables=tables, config_hash=chash, language=language)


def print_report_summary(report):
    print(f"\n📊 {report.label} ({report.config_hash})")
    print(f"   源域 {report.source_domain}: C-index 均值 {format_stat(report.source_cindex)}")
    for d in report.target_domains:
        print(f"   目标域 {d}: {report.target_stat(d).format()}")
    print(f"   合并目标域: {format_stat(report.pooled_cindex)}")
    print(f"⏱️  耗时 {report.wall_clock:.1f}s")


def format_stat(values) -> str:
    return CellStat.from_values(values).format()


# 单独的测试命令
@click.group()
def test():
    """运行内置自检"""
    pass


def run_check(check):
    try:
        check()
    except AssertionError as e:
        print(f"❌ 测试失败: {e}")
        sys.exit(1)


@test.command()
def grad():
    """逐算子梯度检查"""
    run_check(test_gradient_integrity)


@test.command()
def model():
    """整体模型梯度检查"""
    run_check(test_full_model_gradients)


@test.command()
def sdir():
    """Dirac 极限和掩码统计"""
    run_check(test_dirac_limits)
    run_check(test_mask_statistics)


@test.command()
def cade():
    """组合、往返、熵扩张、KL、投影检查"""
    run_check(test_cade_properties)


@test.command()
def metrics():
    """C-index 和 KM 对照"""
    run_check(test_metric_oracles)


@test.command(name='all')
def all_checks():
    """运行所有自检"""
    print("🧪 运行所有自检...")
    print("=" * 50)
    for check in (
        test_gradient_integrity,
        test_full_model_gradients,
        test_dirac_limits,
        test_mask_statistics,
        test_cade_properties,
        test_metric_oracles,
    ):
        run_check(check)
        print()
    print("🎉 所有自检通过！")


# CLI入口点
cli = click.Group(help="单源多模态生存泛化实验 (survdg)")
for command in (generate, train_command, evaluate_command, run, ablate, grid, rotate, report, test):
    cli.add_command(command)


if __name__ == '__main__':
    cli()
