from pointacl.cli import main

main()
