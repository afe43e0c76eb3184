"""Fetches the pretrained perceptual network weights that the texture loss needs.
This is the only module that does actual http requests
"""
import hashlib
import logging
import os
from pathlib import Path

import requests
from tqdm import tqdm

from hybridwm.decorators import except_connection_error
from hybridwm.exceptions import HybridWMException

logger = logging.getLogger(__name__)

VGG16_URL = 'https://download.pytorch.org/models/vgg16-397923af.pth'
CHUNK_SIZE = 1 << 20


class WeightsException(HybridWMException):
    """Base exception for this module. Getting weights went wrong"""
    pass


class WeightsServerException(WeightsException):

    def __init__(self, msg, status_code=None):
        super().__init__(msg)
        self.status_code = status_code


class WeightsChecksumException(WeightsException):
    pass


def expected_sha256_prefix(url: str) -> str:
    """torchvision weight files end in '-<first 8 hex digits of sha256>.pth'"""
    stem = url.rsplit('/', 1)[-1].rsplit('.', 1)[0]
    return stem.rsplit('-', 1)[-1] if '-' in stem else ''


class WeightsServer:
    """Models a server with weight files. Basic HTTP interaction"""

    def __init__(self, url=VGG16_URL, timeout=60):
        """

        Parameters
        ----------
        url: str
            url of the weight file
        timeout: int, optional
            seconds to wait for the server. Defaults to 60
        """
        self.url = url
        self.timeout = timeout

    @property
    def filename(self) -> str:
        return self.url.rsplit('/', 1)[-1]

    @except_connection_error(WeightsException)
    def get(self):
        """Start the download

        Raises
        ------
        WeightsServerException
            When the server does not answer with 200

        Returns
        -------
        WeightsRawResponse
        """
        response = requests.get(self.url, stream=True, timeout=self.timeout)
        return WeightsRawResponse(response).check()


class WeightsRawResponse:

    def __init__(self, raw_response):
        """A response as received from a weights server

        Parameters
        ----------
        raw_response: requests response
        """
        self.raw_response = raw_response

    def check(self) -> 'WeightsRawResponse':
        status = self.raw_response.status_code
        if status != 200:
            raise WeightsServerException(f"HTTP {status} for '{self.raw_response.url}'",
                                         status_code=status)
        return self

    def chunks(self):
        return self.raw_response.iter_content(chunk_size=CHUNK_SIZE)

    @property
    def size(self):
        length = self.raw_response.headers.get('content-length')
        return int(length) if length else None


def sha256_of(path) -> str:
    sha = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(CHUNK_SIZE), b''):
            sha.update(chunk)
    return sha.hexdigest()


@except_connection_error(WeightsException)
def fetch_extractor_weights(dest_dir, server: WeightsServer = None) -> Path:
    """Download the perceptual network weights into dest_dir, unless a file with
    the right checksum is already there.

    Parameters
    ----------
    dest_dir: str or Path
    server: WeightsServer, optional
        Defaults to the torchvision VGG16 download

    Raises
    ------
    WeightsException
        On connection problems or a bad HTTP status
    WeightsChecksumException
        When the download does not match the checksum in its filename. Nothing
        is written then

    Returns
    -------
    Path
        path to the weight file
    """
    server = server or WeightsServer()
    dest_dir = Path(dest_dir)
    dest_dir.mkdir(parents=True, exist_ok=True)
    dest = dest_dir / server.filename
    prefix = expected_sha256_prefix(server.url)

    if dest.exists() and sha256_of(dest).startswith(prefix):
        logger.info(f"Weights already present at {dest}")
        return dest

    logger.info(f"Downloading {server.url}")
    response = server.get()
    tmp = dest.with_name(dest.name + '.part')
    sha = hashlib.sha256()
    with open(tmp, 'wb') as f:
        for chunk in tqdm(response.chunks(), total=(response.size or 0) // CHUNK_SIZE or None,
                          unit='MB', desc=server.filename):
            sha.update(chunk)
            f.write(chunk)
    digest = sha.hexdigest()
    if not digest.startswith(prefix):
        tmp.unlink()
        raise WeightsChecksumException(f"Checksum of {server.url} is {digest[:8]}, expected {prefix}")
    os.replace(tmp, dest)
    return dest
