from src import cli


def main():
    raise SystemExit(cli.main())


if __name__ == "__main__":
    main()
