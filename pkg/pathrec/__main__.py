from pathrec.main import main

main()
