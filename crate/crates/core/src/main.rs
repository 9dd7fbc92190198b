fn main() -> std::process::ExitCode {
    figqa::cli::main()
}
