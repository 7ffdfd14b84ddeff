import hashlib
import json
import logging
import os
import re
import shutil
import tempfile
from datetime import datetime, timezone


class ArtifactStore:
    """Atomic result writer with sha256 metadata sidecars."""

    def __init__(self, base_dir="outputs", keep_history=False, write_metadata=True):
        self.base_dir = base_dir
        self.keep_history = keep_history
        self.write_metadata = write_metadata
        self.history_dir = os.path.join(self.base_dir, "history")
        os.makedirs(self.base_dir, exist_ok=True)
        self.logger = logging.getLogger(__name__)

    def _get_next_version(self, base_name, ext):
        max_version = 0
        version_regex = re.compile(f"^{re.escape(base_name)}_v(\\d+)_[0-9a-f]{{12}}{re.escape(ext)}$")
        if not os.path.isdir(self.history_dir):
            return 1
        for f in os.listdir(self.history_dir):
            match = version_regex.match(f)
            if match:
                max_version = max(max_version, int(match.group(1)))
        return max_version + 1

    @staticmethod
    def _serialize(data):
        if isinstance(data, dict):
            return json.dumps(data, indent=2, ensure_ascii=False, sort_keys=True).encode('utf-8')
        if isinstance(data, str):
            return data.encode('utf-8')
        if isinstance(data, bytes):
            return data
        raise TypeError("Data must be a dictionary, string, or bytes.")

    def _atomic_write(self, final_filepath, payload):
        temp_dir = os.path.join(self.base_dir, "tmp")
        os.makedirs(temp_dir, exist_ok=True)
        fd, temp_path = tempfile.mkstemp(suffix=".tmp", dir=temp_dir)
        with os.fdopen(fd, 'wb') as temp_file:
            temp_file.write(payload)
        shutil.move(temp_path, final_filepath)

    def save(self, name, data):
        """
        Writes `data` to base_dir/name, replacing any previous file in one move.

        Returns:
            dict: {'filepath', 'sha256', 'version'}; version is None without history.
        """
        try:
            payload = self._serialize(data)
            sha256_hash = hashlib.sha256(payload).hexdigest()
            final_filepath = os.path.join(self.base_dir, name)
            self._atomic_write(final_filepath, payload)
            version = None
            if self.keep_history:
                os.makedirs(self.history_dir, exist_ok=True)
                base_name, ext = os.path.splitext(name)
                version = self._get_next_version(base_name, ext)
                archived = os.path.join(self.history_dir, f"{base_name}_v{version}_{sha256_hash[:12]}{ext}")
                shutil.copyfile(final_filepath, archived)
            self.logger.info(f"[ArtifactStore] Saved {final_filepath} (sha256 {sha256_hash[:12]})")
            return {"filepath": final_filepath, "sha256": sha256_hash, "version": version}
        except Exception as e:
            self.logger.error(f"[ArtifactStore] Failed to save '{name}': {e}", exc_info=True)
            raise

    def save_with_metadata(self, name, data, actor, reason, extra=None):
        save_result = self.save(name, data)
        if not self.write_metadata:
            return save_result
        metadata = {
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "sha256": save_result["sha256"],
            "actor": actor,
            "reason": reason,
            "source_file": save_result["filepath"],
        }
        if save_result["version"] is not None:
            metadata["version"] = save_result["version"]
        if extra:
            metadata.update(extra)
        meta_filepath = os.path.splitext(save_result["filepath"])[0] + ".meta.json"
        try:
            self._atomic_write(meta_filepath, self._serialize(metadata))
            self.logger.info(f"[ArtifactStore] Saved metadata: {meta_filepath}")
        except Exception as e:
            self.logger.error(f"[ArtifactStore] Failed to save metadata for '{meta_filepath}': {e}", exc_info=True)
        return save_result
