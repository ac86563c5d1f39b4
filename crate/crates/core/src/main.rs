fn main() -> std::process::ExitCode {
    kvpformer::cli::main()
}
