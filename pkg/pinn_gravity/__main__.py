from pinn_gravity.cli import main

raise SystemExit(main())
