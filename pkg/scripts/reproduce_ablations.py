#!/usr/bin/env python3
"""
Ablation reproduction engine.

Runs the gradient suite and every ablation matrix in sequence, each as a
stage with a time budget, then checks the acceptance claims and saves a
final JSON summary under the output directory.

    PYTHONPATH=src python3 scripts/reproduce_ablations.py --out runs/ablations
"""

import asyncio
import json
import logging
import sys
import time
import uuid
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List

import click

sys.path.insert(0, str(Path(__file__).parent.parent / 'src'))

from hybridlt.experiments import (ExperimentOrchestrator, MatrixConfig,  # noqa: E402
                                  load_acceptance_kit)
from hybridlt.gradcheck import run_gradcheck_suite  # noqa: E402

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger("AblationEngine")

CONFIG_DIR = Path(__file__).parent.parent / 'config'


class AblationEngine:
    """Stages: gradient suite, then one stage per ablation matrix"""

    def __init__(self, out_dir: Path, workers: int, seeds: List[int] = None):
        self.out_dir = out_dir
        self.workers = workers
        self.seeds = seeds
        self.kit = load_acceptance_kit(CONFIG_DIR / 'acceptance.yml')
        self.stage_metrics: Dict[str, Dict[str, Any]] = {}
        self.claims: List[Dict[str, Any]] = []
        self.stages = {
            'gradcheck': {'name': 'Finite-difference gradient suite', 'budget_minutes': 1},
            'ce_baseline': {'name': 'CE-CE vs hybrid losses', 'budget_minutes': 150,
                            'matrix': 'matrix_ce_baseline.yml'},
            'sampling': {'name': 'Feature-branch sampling', 'budget_minutes': 100,
                         'matrix': 'matrix_sampling.yml'},
            'curriculum': {'name': 'Curriculum vs constant alpha vs two-stage', 'budget_minutes': 150,
                           'matrix': 'matrix_curriculum.yml'},
        }

    async def execute_stage(self, stage_id: str, stage: Dict[str, Any]) -> bool:
        operation_id = str(uuid.uuid4())
        logger.info(f"BEGIN stage operation_id={operation_id} stage={stage_id} name={stage['name']!r}")
        start = time.time()
        try:
            if stage_id == 'gradcheck':
                settings = self.kit.get('gradcheck', {})
                results = run_gradcheck_suite(int(settings.get('instances', 50)),
                                              h=float(settings.get('step', 1e-4)),
                                              tolerance=float(settings.get('tolerance', 1e-4)))
                success = all(r.passed for r in results)
                detail = [r.to_dict() for r in results]
            else:
                matrix = MatrixConfig.from_yaml(CONFIG_DIR / stage['matrix'])
                if self.seeds:
                    matrix.seeds = list(self.seeds)
                orchestrator = ExperimentOrchestrator(matrix, self.out_dir / stage_id, self.workers,
                                                      self.kit)
                result = await orchestrator.run()
                self.claims.extend(c.to_dict() for c in result.claims)
                success = not any(c.status == 'fail' for c in result.claims)
                detail = result.summary.to_dict(orient='records')
        except Exception as e:
            logger.error(f"END stage operation_id={operation_id} stage={stage_id} status=error error={e}")
            self.stage_metrics[stage_id] = {'success': False, 'error': str(e)}
            return False

        minutes = (time.time() - start) / 60
        if minutes > stage['budget_minutes']:
            logger.warning(f"stage {stage_id} over budget: {minutes:.1f}m > {stage['budget_minutes']}m")
        self.stage_metrics[stage_id] = {'success': success, 'minutes': minutes,
                                        'budget_minutes': stage['budget_minutes'], 'detail': detail}
        logger.info(f"END stage operation_id={operation_id} stage={stage_id} minutes={minutes:.2f} "
                    f"status={'success' if success else 'failed'}")
        return success

    def save_final_metrics(self) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / 'ablation_summary.json'
        with open(path, 'w') as f:
            json.dump({'finished_at': datetime.now().isoformat(), 'stages': self.stage_metrics,
                       'claims': self.claims}, f, indent=2, default=str)
        logger.info(f"final metrics saved to {path}")
        return path

    async def run(self) -> bool:
        results = [await self.execute_stage(stage_id, stage) for stage_id, stage in self.stages.items()]
        self.save_final_metrics()
        failed_claims = [c['name'] for c in self.claims if c['status'] == 'fail']
        if failed_claims:
            logger.warning(f"claims not reproduced: {', '.join(failed_claims)}")
        return all(results)


@click.command()
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="runs/ablations")
@click.option("--workers", type=int, default=1)
@click.option("--seed", "seeds", type=int, multiple=True, help="Override the matrix seeds (repeatable)")
def main(out_dir: str, workers: int, seeds):
    """Run the gradient suite and every ablation matrix, then check the claims."""
    engine = AblationEngine(Path(out_dir), workers, list(seeds) or None)
    sys.exit(0 if asyncio.run(engine.run()) else 1)


if __name__ == "__main__":
    main()
