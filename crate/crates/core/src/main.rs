use std::process::ExitCode;

fn main() -> ExitCode {
    let result = mobile_former::cli::run(std::env::args_os());
    if result.code == 0 {
        print!("{}", result.report);
    } else {
        eprint!("{}", result.report);
    }
    ExitCode::from(result.code as u8)
}
