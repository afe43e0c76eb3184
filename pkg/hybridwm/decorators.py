from contextlib import contextmanager
from functools import wraps
import threading

import cv2
import requests

from hybridwm.exceptions import HybridWMException


def except_image_io_error(exception_class):
    """decorator to translate any codec or filesystem error into exception_class.

    Made this to have all image file errors derive from HybridWMException
    """
    def decorator(func):
        @wraps(func)
        def inner(*args, **kwargs):
            try:
                return func(*args, **kwargs)
            except HybridWMException:
                raise
            except (OSError, cv2.error, ValueError) as e:
                raise exception_class(f'Image I/O error in {func.__name__}: {e}')
        return inner
    return decorator


def except_connection_error(exception_class):
    """decorator to translate any requests connection error to exception_class."""
    def decorator(func):
        @wraps(func)
        def inner(*args, **kwargs):
            try:
                return func(*args, **kwargs)
            except (requests.exceptions.ConnectionError, requests.exceptions.Timeout) as e:
                raise exception_class(f'Requests connection error: {e}')
        return inner
    return decorator


class AccessCounter:
    """Thread-safe counter of how often something was read.

    Reads inside a suspended() scope are tallied in suspended_count instead,
    so count only holds reads made outside any such scope.
    """

    def __init__(self, name):
        self.name = name
        self._count = 0
        self._suspended_count = 0
        self._depth = 0
        self._lock = threading.Lock()

    def increment(self):
        with self._lock:
            if self._depth:
                self._suspended_count += 1
            else:
                self._count += 1

    @property
    def count(self):
        return self._count

    @property
    def suspended_count(self):
        return self._suspended_count

    @contextmanager
    def suspended(self):
        with self._lock:
            self._depth += 1
        try:
            yield self
        finally:
            with self._lock:
                self._depth -= 1

    def reset(self):
        with self._lock:
            self._count = 0
            self._suspended_count = 0

    def __str__(self):
        return f"{self.__class__.__name__} '{self.name}': {self._count}"


def counted_access(counter: AccessCounter):
    """decorator that bumps counter every time the decorated getter runs

       use under @property for attributes whose reads must be audited
    """
    def decorator(func):
        @wraps(func)
        def inner(*args, **kwargs):
            counter.increment()
            return func(*args, **kwargs)
        return inner
    return decorator
