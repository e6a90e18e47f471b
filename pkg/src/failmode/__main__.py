from failmode.cli import main

raise SystemExit(main())
