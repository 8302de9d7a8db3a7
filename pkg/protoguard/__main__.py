from protoguard.cli import main

raise SystemExit(main())
