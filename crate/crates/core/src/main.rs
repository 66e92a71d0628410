fn main() {
    std::process::exit(snowflake::cli::main_with(std::env::args_os()));
}
