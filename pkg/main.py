# main.py - 命令行入口
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from artifact_store import ArtifactStore
from benchmark import run_bench, run_pipeline_split
from core_system import (
    CLIUsageError, ConfigManager, GuidedCNNError, handle_exceptions, setup_logging
)
from data_models import GuidanceMask, Phase, PipelineMode, Precision, TrainingStrategy
from detector import ToyDetector, evaluate_dataset
from experiment_runner import ExperimentRunner
from guidance_net import GuidanceNet
from scene_generator import build_dataset
from synthesis import pipeline_mode_select
from tensor_core import pad_to_multiple


class _ArgumentParser(argparse.ArgumentParser):
    """用法错误转成 CLIUsageError，由统一出口打印"""

    def error(self, message):
        raise CLIUsageError(message)


class GuidedCNNApplication:
    """引导卷积实验应用主类"""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.config_manager = ConfigManager(args.config)
        self.config_manager.load_config()
        if args.seed is not None:
            self.config_manager.update("seed", args.seed)
        if args.threads is not None:
            self.config_manager.update("threads", args.threads)
        if args.out is not None:
            self.config_manager.update("out_dir", args.out)
        self.config_manager.apply_overrides(args.set or [])
        self.config = self.config_manager.config

        self.out_dir = Path(self.config.out_dir).resolve()
        self.logger = setup_logging(args.log_level or self.config.log_level, str(self.out_dir / "logs"))
        self.store = ArtifactStore(self.out_dir)
        self.precision = Precision(self.config.kernels.precision)

    # ===== 路径与产物 =====
    @property
    def data_dir(self) -> Path:
        return Path(self.args.data).resolve() if getattr(self.args, "data", None) else self.out_dir / "data"

    def _guidance_path(self) -> Path:
        return Path(self.args.guidance).resolve() if getattr(self.args, "guidance", None) else self.out_dir / "guidance.gcw"

    def _detector_path(self) -> Path:
        return Path(self.args.weights).resolve() if getattr(self.args, "weights", None) else self.out_dir / "detector.gcw"

    def _load_guidance(self, required: bool = True) -> Optional[GuidanceNet]:
        path = self._guidance_path()
        if not required and not self.store.path(path).exists():
            return None
        arrays = self.store.load_weights(path)
        return GuidanceNet.from_arrays(arrays, self.config.guidance.tau, self.config.kernels.l2_epsilon)

    def _load_detector(self, required: bool = True) -> Optional[ToyDetector]:
        path = self._detector_path()
        if not required and not self.store.path(path).exists():
            return None
        return ToyDetector.from_arrays(self.store.load_weights(path), self.config.kernels.dilate_radius)

    def _mode(self) -> PipelineMode:
        return PipelineMode(getattr(self.args, "mode", None) or self.config.mode)

    # ===== 子命令 =====
    @handle_exceptions
    def gen_data(self) -> int:
        data = self.config.data
        for split, count in (("train", data.train_images), ("val", data.val_images)):
            samples = build_dataset(count, data, self.config.seed, split, self.config.threads)
            self.store.save_dataset(self.data_dir, split, samples)
        return 0

    @handle_exceptions
    def train_guidance(self) -> int:
        train = self.store.load_dataset(self.data_dir, "train")
        runner = ExperimentRunner(self.config, self.store)
        trainer = runner.guidance_trainer()
        net = trainer.train(train)
        path = self.store.save_weights(self._guidance_path(), net.layers())
        self.store.save_json(path.with_suffix(".json"), {
            'tau': net.tau, 'context_levels': net.context.levels, 'loss_history': trainer.history
        })
        self.logger.info(f"Guidance weights written to {path}")
        return 0

    @handle_exceptions
    def train_detector(self) -> int:
        strategy = TrainingStrategy(self.args.strategy or self.config.detector.strategy)
        train = self.store.load_dataset(self.data_dir, "train")
        needs_guidance = strategy in (TrainingStrategy.PREDICTED_RETRAIN, TrainingStrategy.PREDICTED_SYNTHESIS)
        guidance = self._load_guidance() if needs_guidance else None
        trainer = ExperimentRunner(self.config, self.store).detector_trainer()
        detector = trainer.train(train, strategy, guidance)
        path = self.store.save_weights(self._detector_path(), detector.layers)
        self.store.save_json(path.with_suffix(".json"), {
            'strategy': strategy.value, 'synthesis_p': self.config.synthesis.p, 'loss_history': trainer.history
        })
        self.logger.info(f"Detector weights written to {path}")
        return 0

    @handle_exceptions
    def detect(self) -> int:
        image_path = Path(self.args.image).resolve()
        image = pad_to_multiple(self.store.load_image(image_path))
        detector = self._load_detector()
        mode = self._mode()
        policy = pipeline_mode_select(mode, Phase.TEST, plus_p=self.config.detector.plus_p)

        stem = image_path.stem
        mask: Optional[GuidanceMask] = None
        if policy.uses_mask:
            if self.args.mask:
                mask_path = Path(self.args.mask).resolve()
                mask = (self.store.load_mask(mask_path) if mask_path.suffix == ".gcm"
                        else self.store.import_mask_pgm(mask_path))
            else:
                guidance = self._load_guidance()
                guidance_map = guidance.predict(image)
                self.store.save_heatmap(Path("masks") / f"{stem}_heatmap.pgm", guidance_map)
                mask = guidance.predict_mask(image)
            self.store.save_mask(Path("masks") / f"{stem}.gcm", mask)

        det = self.config.detector
        detections = detector.detect(image, policy, mask, det.score_thresh, det.nms_iou, self.config.threads)
        output = Path(self.args.output).resolve() if self.args.output else Path("detections") / f"{stem}.txt"
        path = self.store.save_detections(output, detections)
        self.logger.info(f"{len(detections)} detections written to {path}")
        return 0

    @handle_exceptions
    def evaluate(self) -> int:
        samples = self.store.load_dataset(self.data_dir, self.args.split)
        detector = self._load_detector()
        mode = self._mode()
        det = self.config.detector
        policy = pipeline_mode_select(mode, Phase.TEST, plus_p=det.plus_p)
        masks = None
        if policy.uses_mask:
            masks = ExperimentRunner.predicted_masks(self._load_guidance(), samples)
        res = evaluate_dataset(detector, samples, policy, masks, det.score_thresh, det.nms_iou,
                               det.eval_iou, self.config.threads)
        row = {'split': self.args.split, 'mode': mode.value, **res}
        self.store.write_csv("eval.csv", [row])
        self.logger.info(f"eval {mode.value}: R={res['recall']:.4f} P={res['precision']:.4f} "
                         f"F={res['f_measure']:.4f} MAC ratio {res['mac_ratio']:.3f}")
        return 0

    @handle_exceptions
    def bench(self) -> int:
        ratios = _parse_floats(self.args.ratios) if self.args.ratios else None
        # 显式 --threads 覆盖 bench.threads 列表
        thread_counts = [self.args.threads] if self.args.threads is not None else self.config.bench.threads
        records = run_bench(self.config, ratios, thread_counts)
        self.store.write_csv("bench.csv", [r.to_dict() for r in records],
                             sort_by=["threads", "mode", "mask_ratio"])
        if not self.args.skip_split:
            rows = run_pipeline_split(self.config, self._load_guidance(required=False),
                                      self._load_detector(required=False))
            self.store.write_csv("runtime_split.csv", rows, sort_by=["mode"])
        return 0

    def _splits(self):
        return self.store.load_dataset(self.data_dir, "train"), self.store.load_dataset(self.data_dir, "val")

    @handle_exceptions
    def ablate(self) -> int:
        train, val = self._splits()
        rows = ExperimentRunner(self.config, self.store).run_ablation(train, val, self._load_guidance(required=False))
        self.store.write_csv("ablation.csv", rows, sort_by=["strategy", "test_mode"])
        return 0

    @handle_exceptions
    def sweep(self) -> int:
        train, val = self._splits()
        reports = ExperimentRunner(self.config, self.store).run_sweeps(train, val, self._load_guidance(required=False))
        self.store.write_csv("tau_sweep.csv", reports['tau_sweep'], sort_by=["tau"])
        self.store.write_csv("context_pr.csv", reports['context_pr'], sort_by=["context_levels", "tau"])
        self.store.write_csv("p_sweep.csv", reports['p_sweep'], sort_by=["seed", "mode", "p"])
        return 0

    @handle_exceptions
    def mask_stats(self) -> int:
        samples = self.store.load_dataset(self.data_dir, self.args.split)
        runner = ExperimentRunner(self.config, self.store)
        rows = runner.mask_statistics(self._load_guidance(), samples, self.args.tau)
        self.store.write_csv("mask_stats.csv", rows, sort_by=["image"])
        return 0

    def run(self) -> int:
        handlers = {
            "gen-data": self.gen_data,
            "train-guidance": self.train_guidance,
            "train-detector": self.train_detector,
            "detect": self.detect,
            "eval": self.evaluate,
            "bench": self.bench,
            "ablate": self.ablate,
            "sweep": self.sweep,
            "mask-stats": self.mask_stats,
        }
        self.logger.info(f"Running {self.args.command} (seed={self.config.seed}, threads={self.config.threads})")
        return handlers[self.args.command]()


def _parse_floats(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CLIUsageError(f"expected a comma-separated list of numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = _ArgumentParser(add_help=False)
    common.add_argument('--config', '-c', default=None, help='JSON/YAML config file (default: built-in defaults)')
    common.add_argument('--seed', type=int, default=None, help='Override the global seed')
    common.add_argument('--threads', type=int, default=None, help='Worker threads for kernels')
    common.add_argument('--out', default=None, help='Output directory for artifacts and reports')
    common.add_argument('--set', action='append', metavar='KEY=VALUE', help='Override a config key (repeatable)')
    common.add_argument('--log-level', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'], default=None)

    parser = _ArgumentParser(description="Guided convolution kernels and sparse-text experiment harness")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)

    sub.add_parser("gen-data", parents=[common], help="Generate synthetic train/val scenes")

    p = sub.add_parser("train-guidance", parents=[common], help="Train the guidance net")
    p.add_argument('--data', default=None)
    p.add_argument('--guidance', default=None, help='Output weights path')

    p = sub.add_parser("train-detector", parents=[common], help="Train the toy detector")
    p.add_argument('--data', default=None)
    p.add_argument('--strategy', choices=[s.value for s in TrainingStrategy], default=None)
    p.add_argument('--guidance', default=None)
    p.add_argument('--weights', default=None, help='Output weights path')

    p = sub.add_parser("detect", parents=[common], help="Detect text in one image")
    p.add_argument('--image', required=True)
    p.add_argument('--mode', choices=[m.value for m in PipelineMode], default=None)
    p.add_argument('--weights', default=None)
    p.add_argument('--guidance', default=None)
    p.add_argument('--mask', default=None, help='Use this .gcm / PGM mask instead of predicting one')
    p.add_argument('--output', default=None)

    p = sub.add_parser("eval", parents=[common], help="Evaluate a trained detector")
    p.add_argument('--data', default=None)
    p.add_argument('--split', default="val")
    p.add_argument('--mode', choices=[m.value for m in PipelineMode], default=None)
    p.add_argument('--weights', default=None)
    p.add_argument('--guidance', default=None)

    p = sub.add_parser("bench", parents=[common], help="Dense vs guided timing")
    p.add_argument('--ratios', default=None, help='Comma-separated mask ratios, e.g. 1,0.25')
    p.add_argument('--skip-split', action='store_true', help='Skip the end-to-end runtime split')
    p.add_argument('--weights', default=None)
    p.add_argument('--guidance', default=None)

    for name in ("ablate", "sweep"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument('--data', default=None)
        p.add_argument('--guidance', default=None)

    p = sub.add_parser("mask-stats", parents=[common], help="Predicted vs ground-truth mask statistics")
    p.add_argument('--data', default=None)
    p.add_argument('--split', default="val")
    p.add_argument('--guidance', default=None)
    p.add_argument('--tau', type=float, default=None)
    return parser


def format_error(error: GuidedCNNError) -> str:
    message = str(error).replace("\\", "\\\\").replace('"', '\\"').replace("\n", " ")
    return f'error={error.code} message="{message}"'


def main(argv: Optional[List[str]] = None) -> int:
    """主入口函数"""
    try:
        args = build_parser().parse_args(argv)
        return GuidedCNNApplication(args).run()
    except GuidedCNNError as e:
        print(format_error(e), file=sys.stderr)
        logging.getLogger("GuidedCNN").debug(f"{type(e).__name__}: {e}")
        return e.exit_status
    except KeyboardInterrupt:
        print('error=interrupted message="interrupted"', file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
