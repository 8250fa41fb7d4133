"""
Basic file handling module for reading and writing the files a run consumes and produces.
"""

import os
import csv
import json
from typing import IO, Any, Dict, List, Tuple
from collections.abc import Iterable

import yaml
import toml

from .exceptions import ConfigError, DataError


class FileHandler:
    """
    #### Handles basic read and write operations on supported file types.

    NOTE:
        The file is opened lazily by `read_file`/`write_to_file`. Remember to close the file object
        by calling the `close_file` method when you open it yourself with `open_file`.

    #### Supported File Types:
    .csv, .json, .yaml, .yml, .toml, .cfg, .txt, .log (text) and .ppm, .glpc (binary).

    #### Parameters:
    @param str `filepath`: path to the file to be read or written to.

    @param str `encoding`: encoding to be used when reading or writing text files. Defaults to 'utf-8'.

    @param bool `not_found_ok`: Whether to raise FileNotFoundError if the file specified by `filepath`
    cannot be found. If set to True, the file is created if it cannot be found, otherwise,
    a FileNotFoundError is raised. Defaults to True.

    @param bool `exists_ok`: Whether to raise FileExistsError if the file specified by `filepath`
    already exists. Defaults to True.

    @param bool `allow_any`: Read and write files with unsupported extensions as plain text.

    #### Attributes:
    @attr str `filetype`: type of file to be read or written to. This is determined by the file extension.

    @attr str `filename`: name of the handled file.

    @attr IO `file`: currently open file object, if any.

    @attr bool `created_file`: True if the file was created by the handler.
    """

    _file: IO = None
    created_file: bool = False
    binary_file_types: Tuple[str, ...] = ('ppm', 'glpc')

    def __init__(
            self,
            filepath: str,
            encoding: str = 'utf-8',
            not_found_ok: bool = True,
            exists_ok: bool = True,
            allow_any: bool = False
        ) -> None:
        if not isinstance(filepath, (str, os.PathLike)):
            raise TypeError('`filepath` should be of type str')
        self.filepath = os.path.abspath(filepath)
        self.encoding = encoding
        self.allow_any = allow_any

        if not os.path.exists(self.filepath):
            if not_found_ok is False:
                raise FileNotFoundError(f"File not found: {self.filepath}")
            os.makedirs(os.path.dirname(self.filepath), exist_ok=True)
            open(self.filepath, 'x').close()
            self.created_file = True
        elif exists_ok is False:
            raise FileExistsError(f"File already exist: {self.filepath}")
        if not os.path.isfile(self.filepath):
            raise DataError(f"Not a file: {self.filepath}")

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_value, traceback):
        self.close_file()

    @property
    def file(self):
        return self._file

    @property
    def filetype(self) -> str:
        filetype = os.path.splitext(self.filepath)[-1].removeprefix('.').lower()
        if filetype in ['yaml', 'yml']:
            filetype = 'yaml'
        return filetype

    @property
    def filename(self) -> str:
        return os.path.basename(self.filepath)

    @property
    def is_binary(self) -> bool:
        return self.filetype in self.binary_file_types

    @staticmethod
    def supported_file_types() -> Tuple[str, ...]:
        return ('csv', 'json', 'yaml', 'toml', 'cfg', 'txt', 'log', 'ppm', 'glpc')

    def _check_supported(self) -> None:
        if self.filetype not in self.supported_file_types() and self.allow_any is False:
            raise DataError(f"Unsupported File Type: `{self.filetype}`")

    def open_file(self, mode: str = 'r') -> IO:
        '''
        Opens the file in the specified mode. Default mode is 'r'.

        Args:
            mode (str): The mode to open the file in.
        '''
        self.close_file()
        if 'b' in mode:
            self._file = open(self.filepath, mode=mode)
        else:
            self._file = open(self.filepath, mode=mode, encoding=self.encoding, newline='')
        return self.file

    def close_file(self) -> None:
        '''Closes the file.'''
        if self.file and not self.file.closed:
            self.file.close()
        return None

    def clear_file(self) -> None:
        """Empties file."""
        self.open_file('w')
        return self.close_file()

    def delete_file(self) -> None:
        '''Deletes the file.'''
        self.close_file()
        os.remove(self.filepath)
        self._file = None

    def copy_to(self, destination: str):
        '''
        Copies the file to the specified destination.

        Returns a new FileHandler object for the destination file.

        Args:
            destination (str): The path to the directory or file the file will be copied to.
        '''
        if not os.path.splitext(destination)[1]:
            hdl = FileHandler(os.path.join(destination, self.filename), encoding=self.encoding, allow_any=True)
        else:
            hdl = FileHandler(destination, encoding=self.encoding, allow_any=True)
        hdl.write_bytes(self.read_bytes())
        return hdl

    def read_bytes(self) -> bytes:
        '''Returns the raw content of the file.'''
        try:
            with open(self.filepath, 'rb') as f:
                return f.read()
        except OSError as e:
            raise DataError(f"File cannot be read. {e}")

    def write_bytes(self, content: bytes) -> None:
        '''
        Replaces the file content with `content`.

        Args:
            content (bytes): raw bytes to write.
        '''
        if not isinstance(content, (bytes, bytearray)):
            raise TypeError('Invalid type for `content`')
        with open(self.filepath, 'wb') as f:
            f.write(content)
        return None

    def read_file(self) -> Any:
        '''Reads the file and returns the content parsed according to the file type.'''
        self._check_supported()
        if self.is_binary:
            return self.read_bytes()
        self.open_file('r')
        try:
            reader = getattr(self, f'_read_{self.filetype}', None)
            if reader is None:
                return self.file.read()
            return reader()
        finally:
            self.close_file()

    def write_to_file(self, content: Any, write_mode: str = 'w') -> None:
        '''
        Writes the content to the file using the specified `write_mode`.

        Args:
            content (Any): The content to write to the file.
            write_mode (str): 'w' (default) overwrites previous content, 'a' appends.
        '''
        if write_mode not in ('w', 'a'):
            raise DataError(f"`{write_mode}` mode does not allow writing to file")
        self._check_supported()
        if self.is_binary:
            return self.write_bytes(content)
        self.open_file(write_mode)
        try:
            writer = getattr(self, f'_write_{self.filetype}', None)
            if writer is None:
                self.file.write(content)
            else:
                writer(content)
        finally:
            self.close_file()
        return None

    def _read_json(self) -> Dict:
        try:
            return json.load(self.file)
        except ValueError as e:
            raise DataError(f'JSON file could not be loaded. {e}')

    def _write_json(self, content: Dict, indent: int = 4) -> None:
        if not isinstance(content, dict):
            raise TypeError('Invalid type for `content`')
        self.file.write(json.dumps(content, indent=indent, sort_keys=True))

    def _read_csv(self) -> List[List[str]]:
        try:
            return list(csv.reader(self.file))
        except csv.Error as e:
            raise DataError(f'csv file could not be read. {e}')

    def _write_csv(self, content: Iterable[Iterable]) -> None:
        if not isinstance(content, Iterable):
            raise TypeError("Invalid type for `content`")
        writer = csv.writer(self.file, lineterminator='\n')
        writer.writerows(content)

    def _read_yaml(self) -> Dict:
        try:
            return yaml.safe_load(self.file) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f'yaml file could not be loaded. {e}')

    def _write_yaml(self, content: dict) -> None:
        yaml.safe_dump(content, self.file, default_flow_style=False, sort_keys=True)

    def _read_toml(self) -> Dict:
        try:
            return toml.load(self.file)
        except toml.TomlDecodeError as e:
            raise ConfigError(f'toml file could not be loaded. {e}')

    def _write_toml(self, content: dict) -> None:
        toml.dump(content, self.file)

    def _read_cfg(self) -> Dict[str, str]:
        '''
        Reads a flat `key=value` file. Blank lines and lines starting with '#' are skipped.
        '''
        content: Dict[str, str] = {}
        for line_no, raw in enumerate(self.file.read().splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith('#'):
                continue
            if '=' not in line:
                raise ConfigError(f"line {line_no}: expected `key=value`, got `{raw}`")
            key, value = (part.strip() for part in line.split('=', 1))
            if not key:
                raise ConfigError(f"line {line_no}: empty key")
            if key in content:
                raise ConfigError(f"line {line_no}: duplicate key `{key}`")
            content[key] = value
        return content

    def _write_cfg(self, content: Dict[str, Any]) -> None:
        if not isinstance(content, dict):
            raise TypeError('Invalid type for `content`')
        for key in sorted(content):
            self.file.write(f"{key}={content[key]}\n")
