from dge.cli import main

raise SystemExit(main())
