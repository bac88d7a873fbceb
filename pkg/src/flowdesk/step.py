"""
Step
"""

import gc
import logging
import sys
from contextlib import nullcontext
from os.path import basename, dirname, splitext

import yaml

from . import _config, _log, config_parser, utilities

logger = logging.getLogger(__name__)


def _plain(value):
    """Strip ConfigObj sections and command-line string markers."""
    from . import _cmdline

    if isinstance(value, dict):
        return {key: _plain(val) for key, val in value.items()}
    if isinstance(value, list | tuple):
        return [_plain(val) for val in value]
    if isinstance(value, _cmdline.FromCommandLine):
        return str(value)
    return value


class Step:
    """
    A configurable unit of work.

    Parameters are declared by the ``spec`` string of the class and of all
    its base classes (ConfigObj spec syntax) and become attributes of the
    instance.  Sub-configs are spec sections and arrive as dicts.
    """

    spec = """
    out_dir = output_dir(default='.')  # Directory for run outputs (created on run)
    """

    # This needs to be set to a logging formatter for any
    # log_records to be saved.
    _log_records_formatter = None

    @classmethod
    def load_spec_file(cls):
        return config_parser.get_merged_spec_file(cls)

    @classmethod
    def print_configspec(cls):
        specfile = cls.load_spec_file()
        specfile.write(sys.stdout.buffer)

    @classmethod
    def from_config_file(cls, config_file, name=None):
        """
        Create a step from a configuration file.

        Parameters
        ----------
        config_file : str or pathlib.Path
            The config file (ASDF, JSON or ConfigObj) to load parameters
            from.
        name : str, optional
            If provided, use that name for the returned instance.
            If not provided, the following are tried (in order):
            - The ``name`` parameter in the config file
            - The filename of the config file
            - The name of returned class

        Returns
        -------
        step : Step instance
            If the config file has a ``class`` parameter, it must name
            ``cls`` or a subclass, and an instance of that class is returned.
        """
        config_file = str(config_file)
        config = config_parser.load_config_file(config_file)
        step_class, name = cls._parse_class_and_name(config, name, config_file)
        return step_class.from_config_section(
            config, name=name, config_file=config_file
        )

    @classmethod
    def _parse_class_and_name(cls, config, name=None, config_file=None):
        if "class" in config:
            step_class = utilities.import_class(
                config["class"], config_file=config_file
            )
            if not issubclass(step_class, cls):
                raise TypeError(
                    "Configuration file does not match the expected step class. "
                    f" Expected {cls}, got {step_class}"
                )
        else:
            step_class = cls

        if not name:
            name = config.get("name")
            if not name:
                if isinstance(config_file, str):
                    name = splitext(basename(config_file))[0]
                else:
                    name = step_class.__name__

        if "name" in config:
            del config["name"]
        if "class" in config:
            del config["class"]

        return step_class, name

    @classmethod
    def from_config_section(cls, config, name=None, config_file=None):
        """
        Create a step from a configuration tree.

        Parameters
        ----------
        config : configobj.Section instance
            Parameters for this step.  Validated (and completed with the
            spec defaults) in place.
        name : str, optional
            If provided, use that name for the returned instance.
            If not provided, try the following (in order):
            - The ``name`` parameter in the config
            - The name of returned class
        config_file : str or pathlib.Path, optional
            The path to the config file that created this step, if
            any.  This is used to resolve relative file name
            parameters in the config file.

        Returns
        -------
        step : instance of cls

        Raises
        ------
        flowdesk.exceptions.ValidationError
            If the config does not validate against the spec.
        """
        if not name:
            name = config.get("name") or cls.__name__

        for key in ("name", "class", "config_file"):
            if key in config:
                del config[key]

        spec = cls.load_spec_file()
        config_parser.validate(config, spec, root_dir=dirname(config_file or ""))

        # cmdline.FromCommandLine instances should not be passed to
        # steps. Instead, convert them back to strings.
        kwargs = {k: _plain(v) for k, v in config.items()}

        return cls(
            name=name,
            config_file=config_file,
            _validate_kwds=False,
            **kwargs,
        )

    def __init__(self, name=None, config_file=None, _validate_kwds=True, **kws):
        """
        Create a `~flowdesk.step.Step` instance.

        Parameters
        ----------
        name : str
            The name of the Step instance.  Used in logging messages.
            If not provided, the class name is used.

        config_file : str or pathlib.Path
            The path to the config file that this step was initialized
            with.  Use to determine relative path names of other files.

        _validate_kwds : bool
            Validate given ``kws`` against the spec.

        **kws : dict
            Additional parameters to set.  These will be set as member
            variables on the new Step instance.
        """
        # A list of formatted records emitted to the flowdesk loggers
        # during the most recent call to Step.run.
        self._log_records = []
        if _validate_kwds:
            spec = self.load_spec_file()
            kws = _plain(
                config_parser.config_from_dict(
                    kws,
                    spec,
                    root_dir=dirname(config_file or ""),
                )
            )

        if name is None:
            name = self.__class__.__name__
        self.name = name
        self.qualified_name = f"{_log.FLOWDESK_ROOT_LOGGER}.{self.name}"

        # Set the parameters as member variables
        for key, val in kws.items():
            setattr(self, key, val)

        logger.info("%s instance created.", self.__class__.__name__)

        self.config_file = config_file

    @property
    def log_records(self):
        """
        Retrieve logs from the most recent run of this step.

        Returns
        -------
        list of str
        """
        return self._log_records

    def run(self, *args):
        """
        Run handles the generic setup and teardown that happens with
        the running of each step.  Cross-field checks happen in `validate`,
        before `process` does the work unique to each step type.
        """
        gc.collect()

        # if run is called directly attach handlers to record logs
        if _log.LogConfig.applied is None:
            ctx = _log.LogConfig(
                [],
                level=logging.NOTSET,
                recording_formatter=self._log_records_formatter,
            ).context(log_names=[_log.FLOWDESK_ROOT_LOGGER])
        else:
            ctx = nullcontext(_log.LogConfig.applied.log_records)
        with ctx as log_records:
            self._log_records = log_records

            logger.info("Step %s running with args %s.", self.name, args)
            logger.info(
                "Step %s parameters are:%s",
                self.name,
                # Add an indent to each line of the YAML output
                "\n  "
                + "\n  ".join(
                    yaml.dump(self.get_pars(), sort_keys=False)
                    .strip()
                    # Convert serialized YAML types true/false/null to Python types
                    .replace(" false", " False")
                    .replace(" true", " True")
                    .replace(" null", " None")
                    .splitlines()
                ),
            )

            self.validate()
            step_result = self.process(*args)

            logger.info("Step %s done", self.name)

        return step_result

    def validate(self):
        """
        Cross-field checks that the spec cannot express.  Runs before
        `process`; subclasses raise `flowdesk.exceptions.ValidationError`.
        """

    def process(self, *args):
        """
        This is where real work happens. Every Step subclass has to
        override this method. The default behaviour is to raise a
        NotImplementedError exception.
        """
        raise NotImplementedError("Steps have to override process().")

    @classmethod
    def call(cls, *args, **kwargs):
        """
        Create and run a new instance of the class.

        By default, log handlers are added for the duration of the run.
        To avoid configuring the log, specify ``configure_log=False`` in
        the keyword arguments.

        To set configuration parameters, pass a ``config_file`` path or
        keyword arguments.  Keyword arguments override those in the
        specified ``config_file``.

        Any positional ``*args`` will be passed along to the step's
        ``process`` method.
        """
        log_names = cls.get_flowdesk_loggers()
        configure_log = kwargs.pop("configure_log", True)
        if configure_log and _log.LogConfig.applied is None:
            log_cfg = _log.load_configuration()
            log_cfg.set_recording_formatter(cls._log_records_formatter)
            ctx = log_cfg.context(log_names)
        else:
            ctx = nullcontext()

        with ctx:
            config, config_file = cls.build_config(**kwargs)
            step_class, name = cls._parse_class_and_name(config, None, config_file)
            instance = step_class.from_config_section(
                config, name=name, config_file=config_file
            )
            return instance.run(*args)

    @staticmethod
    def get_flowdesk_loggers():
        """
        Get the names of loggers to configure.

        Returns
        -------
        loggers : tuple of str
            Tuple of log names to configure.
        """
        return (_log.FLOWDESK_ROOT_LOGGER, "py.warnings")

    def get_pars(self):
        """Retrieve the configuration parameters of a step

        Returns
        -------
        dict
            Keys are the parameters and values are the values; sub-configs
            are nested dicts.
        """
        spec = config_parser.get_merged_spec_file(self)
        instance_pars = {}
        for key in spec:
            if hasattr(self, key):
                instance_pars[key] = getattr(self, key)
        pars = config_parser.config_from_dict(instance_pars, spec, allow_missing=True)
        return _plain(config_parser.to_plain_dict(pars))

    def export_config(self, filename):
        """
        Export this step's parameters to an ASDF config file.

        Parameters
        ----------
        filename : str or pathlib.Path
            Path to config file.
        """
        with _config.export_config(self).to_asdf() as af:
            af.write_to(filename)

    @classmethod
    def build_config(cls, **kwargs):
        """Build the ConfigObj to initialize a Step

        A Step config is built in the following order:

        - Local parameter file (``config_file`` keyword)
        - Step keyword arguments

        Parameters
        ----------
        kwargs : dict
            Keyword arguments that specify Step parameters.

        Returns
        -------
        config, config_file : ConfigObj, str
            The configuration and the config filename.
        """
        config = config_parser.ConfigObj()
        config_file = kwargs.pop("config_file", None)
        if config_file is not None:
            config_file = str(config_file)
            config_parser.merge_config(
                config, config_parser.load_config_file(config_file)
            )

        config_kwargs = config_parser.ConfigObj()
        config_parser.merge_config(config_kwargs, kwargs)
        config_parser.merge_config(config, config_kwargs)

        return config, config_file
