import threading
from concurrent.futures import ThreadPoolExecutor, as_completed
from typing import Any, Callable, Dict, Generic, Iterable, List, Optional, Tuple, TypeVar

StreamHandler = Callable[[str, Dict[str, Any]], None]

T = TypeVar("T")


class BatchRunner(Generic[T]):
    """
    负责把逐图像的处理函数分发到线程池，并按 image_id 排序汇总结果。

    各图像互不依赖；无论 workers 取多少、完成顺序如何，
    返回结果总是按 image_id 排序，因此输出文件逐字节一致。
    """

    def __init__(self, workers: int = 1, stream_handler: Optional[StreamHandler] = None):
        if workers < 1:
            raise ValueError(f"workers 至少为 1，实际为 {workers}")
        self.workers = workers
        self.stream_handler = stream_handler
        self._lock = threading.Lock()
        self._results: Dict[str, T] = {}
        self._errors: Dict[str, Exception] = {}

    def _emit(self, event_type: str, payload: Dict[str, Any]) -> None:
        if self.stream_handler is None:
            return
        with self._lock:
            self.stream_handler(event_type, payload)

    def _record(self, image_id: str, value: T, total: int) -> None:
        with self._lock:
            self._results[image_id] = value
            done = len(self._results)
        self._emit("image_done", {"image_id": image_id, "done": done, "total": total})

    def run(self, image_ids: Iterable[str], job: Callable[[str], T]) -> List[Tuple[str, T]]:
        """对每个 image_id 执行 job，返回按 image_id 排序的 (image_id, 结果) 列表。"""
        ids = sorted(set(image_ids))
        self._results = {}
        self._errors = {}
        total = len(ids)

        if self.workers == 1:
            for image_id in ids:
                self._record(image_id, job(image_id), total)
        else:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                futures = {pool.submit(job, image_id): image_id for image_id in ids}
                for future in as_completed(futures):
                    image_id = futures[future]
                    try:
                        self._record(image_id, future.result(), total)
                    except Exception as exc:
                        with self._lock:
                            self._errors[image_id] = exc

            if self._errors:
                # 抛出排序最靠前的图像的异常，保证报错信息可复现
                first = sorted(self._errors)[0]
                raise self._errors[first]

        return [(image_id, self._results[image_id]) for image_id in ids]
