import logging
from pathlib import Path
from typing import Union

from core.scene_parser import SceneDocument, SceneParser

logger = logging.getLogger(__name__)


def load_scene_folder(folder_path: Union[str, Path]) -> SceneDocument:
    """
    Load all JSON, YAML, and YML scene documents under folder_path, in sorted
    path order, and merge their scenes and edit pairs into one document.
    """
    merged = SceneDocument()
    root = Path(folder_path)
    if not root.is_dir():
        logger.warning(f"scene folder {root} does not exist")
        return merged
    files = sorted(list(root.rglob("*.json")) + list(root.rglob("*.yaml")) + list(root.rglob("*.yml")))
    for filepath in files:
        doc = SceneParser.from_file(filepath)
        merged.scenes.extend(doc.scenes)
        merged.pairs.extend(doc.pairs)
        logger.info(f"loaded {len(doc.scenes)} scenes and {len(doc.pairs)} edit pairs from {filepath}")
    return merged
