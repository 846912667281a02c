use std::io;

fn main() {
    let status = dieroll::cli::run_cli(std::env::args_os(), &mut io::stdout(), &mut io::stderr());
    std::process::exit(status as i32);
}
