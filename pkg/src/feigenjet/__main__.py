from .render_cli import main

main()
