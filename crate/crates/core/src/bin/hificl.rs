fn main() -> std::process::ExitCode {
    hificl_core::cli::main()
}
