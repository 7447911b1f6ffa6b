import logging
import os
from typing import Dict, List, NamedTuple, Optional

from cryptography.hazmat.primitives import padding
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from minerforge.helpers import DecryptionFailed, MissingKeyMaterial, UsageError, load_yaml_data

logger = logging.getLogger('extractor')


class KeyMaterial(NamedTuple):
    key: bytes
    iv: bytes


class DecryptorPlugin:
    """A static-secret decryption scheme, keyed from outside the repository.

    Plugins fail closed: without key material decrypt() raises instead of
    passing ciphertext through.
    """

    class Meta:
        abstract = True

    plugin_id = ''
    cipher_family = ''

    def __init__(self, key_material: Optional[KeyMaterial] = None) -> None:
        self.key_material = key_material

    @property
    def has_key(self) -> bool:
        return self.key_material is not None

    def applies_to(self, data: bytes, filename: str) -> bool:
        raise Exception("Needs Implementation")

    def decrypt(self, data: bytes) -> bytes:
        raise Exception("Needs Implementation")

    def __repr__(self):
        return f"<{type(self).__name__} {self.plugin_id} key={'yes' if self.has_key else 'no'}>"


class AesCbcDecryptor(DecryptorPlugin):
    """AES-CBC with a fixed key and IV and PKCS#7 padding.

    Payloads carry a short header magic, or arrive as bare ciphertext named *.enc.
    """

    plugin_id = 'aes-cbc'
    cipher_family = 'AES-CBC, static key and IV, PKCS#7'
    MAGIC = b'MFCBC1'
    EXTENSIONS = ('.enc',)

    def __init__(self, key_material: Optional[KeyMaterial] = None) -> None:
        if key_material is not None:
            if len(key_material.key) not in (16, 24, 32):
                raise UsageError(f"{self.plugin_id}: key must be 16, 24 or 32 bytes")
            if len(key_material.iv) != 16:
                raise UsageError(f"{self.plugin_id}: IV must be 16 bytes")

        super().__init__(key_material)

    def applies_to(self, data: bytes, filename: str) -> bool:
        return bytes(data[:len(self.MAGIC)]) == self.MAGIC or filename.lower().endswith(self.EXTENSIONS)

    def _cipher(self) -> Cipher:
        if not self.has_key:
            raise MissingKeyMaterial(f"No key material for {self.plugin_id}")

        return Cipher(algorithms.AES(self.key_material.key), modes.CBC(self.key_material.iv))

    def decrypt(self, data: bytes) -> bytes:
        cipher = self._cipher()
        payload = bytes(data)

        if payload.startswith(self.MAGIC):
            payload = payload[len(self.MAGIC):]

        if not payload or len(payload) % 16:
            raise DecryptionFailed(f"{self.plugin_id}: ciphertext is not a whole number of blocks")

        decryptor = cipher.decryptor()
        padded = decryptor.update(payload) + decryptor.finalize()
        unpadder = padding.PKCS7(128).unpadder()

        try:
            return unpadder.update(padded) + unpadder.finalize()
        except ValueError as e:
            raise DecryptionFailed(f"{self.plugin_id}: bad padding, wrong key or corrupt payload") from e

    def encrypt(self, plaintext: bytes) -> bytes:
        """Inverse of decrypt, used to build fixtures."""
        padder = padding.PKCS7(128).padder()
        padded = padder.update(plaintext) + padder.finalize()
        encryptor = self._cipher().encryptor()

        return self.MAGIC + encryptor.update(padded) + encryptor.finalize()


PLUGINS = [AesCbcDecryptor]


def _parse_key(plugin_id: str, entry) -> KeyMaterial:
    try:
        return KeyMaterial(bytes.fromhex(str(entry['key'])), bytes.fromhex(str(entry['iv'])))
    except (KeyError, TypeError, ValueError) as e:
        raise UsageError(f"Key material for {plugin_id} needs hex 'key' and 'iv' ({e})") from e


def load_key_material(c, key_file: Optional[str] = None) -> Dict[str, KeyMaterial]:
    """Keys from a YAML key file ({plugin_id: {key: hex, iv: hex}}), then the environment.

    Environment variables are <KEY_ENV_PREFIX><PLUGIN>_KEY and _IV, e.g.
    MINERFORGE_KEY_AES_CBC_KEY. The key file wins when both are present.
    """
    keys: Dict[str, KeyMaterial] = {}
    key_file = key_file or c.KEY_FILE

    for plugin in PLUGINS:
        env = c.KEY_ENV_PREFIX + plugin.plugin_id.upper().replace('-', '_')
        key, iv = os.environ.get(env + '_KEY'), os.environ.get(env + '_IV')

        if key and iv:
            keys[plugin.plugin_id] = _parse_key(plugin.plugin_id, {'key': key, 'iv': iv})

    if key_file:
        table = load_yaml_data('', key_file) or {}

        if not isinstance(table, dict):
            raise UsageError(f"Key file {key_file} must map plugin ids to key material")

        for plugin_id, entry in table.items():
            keys[str(plugin_id)] = _parse_key(str(plugin_id), entry)

    return keys


def build_plugins(c, key_file: Optional[str] = None) -> List[DecryptorPlugin]:
    keys = load_key_material(c, key_file)
    plugins = [p(keys.get(p.plugin_id)) for p in PLUGINS]

    for p in plugins:
        logger.debug(f"Decryptor {p!r}")

    return plugins
