import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor


class RunBudgetExceeded(RuntimeError):
    """Raised when a run passes its time or work-item limit."""


def default_threads():
    return os.cpu_count() or 1


class TrialRunner:
    """
    Fans Monte-Carlo trials out over a thread pool and enforces the run budget.

    Results always come back in item order, so reductions over them do not
    depend on the thread schedule.
    """
    def __init__(self, threads=1, session_policy=None):
        """
        Args:
            threads (int): worker threads; 1 runs inline.
            session_policy (dict): optional limits,
                e.g. {'timeout_seconds': 3600, 'max_work_items': 10**7}.
        """
        if session_policy is None:
            session_policy = {}
        self.threads = max(1, int(threads or 1))
        self.timeout_seconds = session_policy.get("timeout_seconds")
        self.max_work_items = session_policy.get("max_work_items")
        self.start_time = time.time()
        self.work_counter = 0
        self.logger = logging.getLogger(__name__)
        self.logger.debug(f"[TrialRunner] threads={self.threads}, timeout={self.timeout_seconds}s, "
                          f"max_work_items={self.max_work_items}")

    def check_status(self):
        """
        Returns:
            tuple: ('STATUS_OK' | 'TIMEOUT_REACHED' | 'MAX_WORK_REACHED', message)
        """
        elapsed = time.time() - self.start_time
        if self.timeout_seconds is not None and elapsed > self.timeout_seconds:
            return "TIMEOUT_REACHED", f"Run timed out after {elapsed:.2f}s (limit: {self.timeout_seconds}s)."
        if self.max_work_items is not None and self.work_counter > self.max_work_items:
            return "MAX_WORK_REACHED", f"Work item limit of {self.max_work_items} exceeded."
        return "STATUS_OK", "Run is within its budget."

    def map(self, fn, items):
        items = list(items)
        self.work_counter += len(items)
        status, message = self.check_status()
        if status != "STATUS_OK":
            self.logger.warning(f"[TrialRunner] {message}")
            raise RunBudgetExceeded(message)
        if self.threads == 1 or len(items) < 2:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=self.threads) as executor:
            return list(executor.map(fn, items))
