import sys

from cli.experiments import main


if __name__ == "__main__":
    """
    Main entry point for running an experiment.

    Parses the command line, runs the selected mode and exits with its status.
    """

    sys.exit(main())
