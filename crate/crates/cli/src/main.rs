fn main() { println!("fusegan"); }
