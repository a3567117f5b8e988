"""
Storage layer for calibrated model bundles.

A bundle is a directory:
- forecaster.json: fitted quantile forecaster
- split.json: series ids of each dataset part
- conformal/<channel>_<group>.json: per-step conformal adjustments
- anomaly/<channel>_<group>.json: spline basis, coefficient EDFs, copulas
- anomaly/<channel>_<group>_rss.csv: elbow curve used to pick K
- manifest.json: format version, resolved config, seeds, SHA-256 of every file

Writes go to a temporary sibling directory that is renamed into place, so a
failed calibration leaves no partial bundle. Reads verify every hash.

Usage:
    storage = BundleStorageManager('models/run1')
    storage.write_bundle(config, forecaster, split, conformal_models, anomaly_models)
    bundle = storage.load_bundle()
"""

import hashlib
import json
import math
import re
import shutil
import tempfile
from dataclasses import dataclass
from io import StringIO
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import pandas as pd
from loguru import logger

from anomaly import AnomalyModel
from conformal import ConformalModel
from errors import BundleError, CocaiError
from forecaster import Forecaster
from series_core import DatasetSplit

BUNDLE_FORMAT = 'cocai-bundle/1'
MANIFEST = 'manifest.json'
ALL_GROUPS = 'all'


def model_key(channel_name, group):
    """File stem for a (channel, group) model."""
    stem = f"{channel_name}_{group if group is not None else ALL_GROUPS}"
    return re.sub(r'[^A-Za-z0-9._-]+', '-', stem)


@dataclass
class ModelBundle:
    manifest: dict
    forecaster: Forecaster
    split: DatasetSplit
    conformal: Dict[Tuple[int, Optional[str]], ConformalModel]
    anomaly: Dict[Tuple[int, Optional[str]], AnomalyModel]

    @property
    def config(self):
        return self.manifest['config']

    @property
    def groups(self):
        return sorted({g for _, g in self.conformal}, key=lambda g: (g is not None, g or ''))


class BundleStorageManager:
    """Reads and writes one model bundle directory."""

    def __init__(self, root):
        self.root = Path(root)

    # ========================================================================
    # Type conversion helpers
    # ========================================================================

    def _convert_floats_for_json(self, obj):
        """numpy -> builtins; +-inf -> "inf"/"-inf" strings."""
        if isinstance(obj, dict):
            return {str(k): self._convert_floats_for_json(v) for k, v in obj.items()}
        elif isinstance(obj, (list, tuple)):
            return [self._convert_floats_for_json(item) for item in obj]
        elif isinstance(obj, np.ndarray):
            return self._convert_floats_for_json(obj.tolist())
        elif isinstance(obj, (bool, np.bool_)):
            return bool(obj)
        elif isinstance(obj, np.integer):
            return int(obj)
        elif isinstance(obj, (float, np.floating)):
            value = float(obj)
            if math.isnan(value):
                raise BundleError("refusing to store NaN in a model file")
            if math.isinf(value):
                return 'inf' if value > 0 else '-inf'
            return value
        return obj

    def _convert_json_to_floats(self, obj):
        if isinstance(obj, dict):
            return {k: self._convert_json_to_floats(v) for k, v in obj.items()}
        elif isinstance(obj, list):
            return [self._convert_json_to_floats(item) for item in obj]
        elif obj == 'inf':
            return math.inf
        elif obj == '-inf':
            return -math.inf
        return obj

    def encode_json(self, obj):
        return json.dumps(self._convert_floats_for_json(obj), sort_keys=True, indent=2, allow_nan=False) + '\n'

    # ========================================================================
    # Bundle writes
    # ========================================================================

    def _write_files(self, target, files):
        hashes = {}
        for rel, content in sorted(files.items()):
            data = content.encode('utf-8')
            path = target / rel
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(data)
            hashes[rel] = hashlib.sha256(data).hexdigest()
        return hashes

    def write_files(self, files, meta):
        """Atomically replace the bundle with `files` (relative path -> text) plus a manifest."""
        self.root.parent.mkdir(parents=True, exist_ok=True)
        staging = Path(tempfile.mkdtemp(prefix=f'.{self.root.name}.tmp-', dir=self.root.parent))
        try:
            hashes = self._write_files(staging, files)
            manifest = {'format_version': BUNDLE_FORMAT, 'files': hashes, **meta}
            (staging / MANIFEST).write_text(self.encode_json(manifest))
            if self.root.exists():
                backup = self.root.with_name(f'.{self.root.name}.old')
                shutil.rmtree(backup, ignore_errors=True)
                self.root.rename(backup)
                staging.rename(self.root)
                shutil.rmtree(backup, ignore_errors=True)
            else:
                staging.rename(self.root)
        except Exception:
            shutil.rmtree(staging, ignore_errors=True)
            raise
        logger.info(f"Wrote bundle {self.root} ({len(files)} files)")
        return manifest

    def write_bundle(self, config, forecaster, split, conformal_models, anomaly_models, seeds=None):
        names = forecaster.channel_names
        files = {
            'forecaster.json': self.encode_json(forecaster.to_dict()),
            'split.json': self.encode_json(split.to_dict()),
        }
        for model in conformal_models:
            files[f'conformal/{model_key(names[model.channel], model.group_label)}.json'] = self.encode_json(model.to_dict())
        for model in anomaly_models:
            key = model_key(names[model.channel], model.group_label)
            files[f'anomaly/{key}.json'] = self.encode_json(model.to_dict())
            if model.rss_curve is not None:
                files[f'anomaly/{key}_rss.csv'] = model.rss_curve.to_frame().to_csv(index=False, lineterminator='\n')
        meta = {'config': config.to_dict(), 'seeds': seeds or {'split': config.seed, 'calibration': config.seed}}
        return self.write_files(files, meta)

    # ========================================================================
    # Bundle reads
    # ========================================================================

    def read_manifest(self, verify=True):
        path = self.root / MANIFEST
        if not path.exists():
            raise BundleError(f"no bundle at {self.root} (missing {MANIFEST})")
        manifest = self._convert_json_to_floats(json.loads(path.read_text()))
        if manifest.get('format_version') != BUNDLE_FORMAT:
            raise BundleError(f"bundle {self.root} has format {manifest.get('format_version')!r}, expected {BUNDLE_FORMAT}")
        if verify:
            for rel, expected in manifest['files'].items():
                file_path = self.root / rel
                if not file_path.exists():
                    raise BundleError(f"bundle {self.root}: listed file {rel} is missing")
                actual = hashlib.sha256(file_path.read_bytes()).hexdigest()
                if actual != expected:
                    raise BundleError(f"bundle {self.root}: hash mismatch for {rel}")
        return manifest

    def read_json(self, rel):
        return self._convert_json_to_floats(json.loads((self.root / rel).read_text()))

    def read_frame(self, rel):
        return pd.read_csv(StringIO((self.root / rel).read_text()))

    def load_bundle(self):
        manifest = self.read_manifest()
        try:
            forecaster = Forecaster.from_dict(self.read_json('forecaster.json'))
            split = DatasetSplit.from_dict(self.read_json('split.json'))
            conformal, anomaly = {}, {}
            for rel in sorted(manifest['files']):
                if rel.startswith('conformal/'):
                    model = ConformalModel.from_dict(self.read_json(rel))
                    conformal[(model.channel, model.group_label)] = model
                elif rel.startswith('anomaly/') and rel.endswith('.json'):
                    model = AnomalyModel.from_dict(self.read_json(rel))
                    anomaly[(model.channel, model.group_label)] = model
        except CocaiError:
            raise
        except (KeyError, TypeError, ValueError) as e:
            raise BundleError(f"bundle {self.root} is malformed: {e}")
        logger.info(f"Loaded bundle {self.root}: {len(conformal)} conformal, {len(anomaly)} anomaly models")
        return ModelBundle(manifest, forecaster, split, conformal, anomaly)
