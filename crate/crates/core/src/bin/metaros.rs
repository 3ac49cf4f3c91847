fn main() -> std::process::ExitCode {
    metaros::cli::main()
}
