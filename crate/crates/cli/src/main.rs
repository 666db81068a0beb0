fn main() {
    std::process::exit(rankclip_cli::run(std::env::args_os()));
}
